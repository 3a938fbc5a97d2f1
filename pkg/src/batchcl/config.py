"""Experiment configuration: schema-validated parsing and method dispatch glue.

Config files are JSON with a fixed schema; unknown keys anywhere are
rejected so typos fail loudly instead of silently running defaults.
``parse_config -> config_to_dict -> parse_config`` is an identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .baselines import BASELINE_METHODS, BaselineConfig
from .losses import DISTILL_KINDS, LossCoefficients
from .protocol import BmcConfig
from .replay import SAMPLING_STRATEGIES
from .streams import STREAM_KINDS, TaskStream, generate_stream, load_feature_stream

METHODS = ("bmc",) + BASELINE_METHODS + ("multitask",)


class ConfigError(ValueError):
    """Invalid experiment configuration, with the offending key in the text."""


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "permuted"  # permuted | split_synthetic | file
    n_tasks: int = 4
    classes_per_task: int = 2
    dim: int = 16
    train_per_task: int = 500
    val_per_task: int = 100
    seed: int = 0
    separation: float = 3.0
    path: str = ""  # only for kind=file


@dataclass(frozen=True)
class ModelSpec:
    res_blocks: int = 2
    res_layers_per_block: int = 3
    res_dim: int = 256
    hidden_dim: int = 128
    dropout_p: float = 0.3


@dataclass(frozen=True)
class TrainingSpec:
    epochs_per_task: int = 2
    lr: float = 0.1
    batch_size: int = 32


@dataclass(frozen=True)
class BmcSpec:
    experts_per_step: int = 10
    rehearsal_epochs: int = 100
    buffer_capacity: int = 10_000
    memory_capacity: int = 10_000
    sampling: str = "random"
    distill_kind: str = "features"
    stability_coef: float = 1.0
    task_coef: float = 1.0
    consolidation_coef: float = 1.0
    workers: int = 1


@dataclass(frozen=True)
class BaselineSpec:
    memory_capacity: int = 10_000
    replay_coef: float = 1.0
    penalty_coef: float = 0.7
    gamma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    seed: int
    stream: StreamSpec
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    bmc: BmcSpec = field(default_factory=BmcSpec)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    out_dir: str = "runs"


def _props(cls) -> dict:
    kinds = {int: {"type": "integer"}, float: {"type": "number"}, str: {"type": "string"}}
    return {f.name: dict(kinds[f.type if isinstance(f.type, type) else _ann(f)]) for f in fields(cls)}


def _ann(f) -> type:
    return {"int": int, "float": float, "str": str}[f.type]


def _section(cls, extra: dict | None = None) -> dict:
    props = _props(cls)
    for key, override in (extra or {}).items():
        props[key].update(override)
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["method", "seed", "stream"],
    "additionalProperties": False,
    "properties": {
        "method": {"enum": list(METHODS)},
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "stream": _section(StreamSpec, {"kind": {"enum": list(STREAM_KINDS) + ["file"]}}),
        "model": _section(ModelSpec),
        "training": _section(TrainingSpec),
        "bmc": _section(
            BmcSpec,
            {
                "sampling": {"enum": list(SAMPLING_STRATEGIES)},
                "distill_kind": {"enum": list(DISTILL_KINDS)},
            },
        ),
        "baseline": _section(BaselineSpec),
    },
}


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping against the schema and build the config."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<top level>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from e
    return ExperimentConfig(
        method=raw["method"],
        seed=raw["seed"],
        stream=StreamSpec(**raw["stream"]),
        model=ModelSpec(**raw.get("model", {})),
        training=TrainingSpec(**raw.get("training", {})),
        bmc=BmcSpec(**raw.get("bmc", {})),
        baseline=BaselineSpec(**raw.get("baseline", {})),
        out_dir=raw.get("out_dir", "runs"),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return parse_config(raw)


def build_stream(spec: StreamSpec) -> TaskStream:
    if spec.kind == "file":
        if not spec.path:
            raise ConfigError("stream kind 'file' requires stream/path")
        return load_feature_stream(spec.path)
    return generate_stream(
        spec.kind,
        n_tasks=spec.n_tasks,
        classes_per_task=spec.classes_per_task,
        dim=spec.dim,
        train_per_task=spec.train_per_task,
        val_per_task=spec.val_per_task,
        seed=spec.seed,
        separation=spec.separation,
    )


def to_bmc_config(cfg: ExperimentConfig, workers: int | None = None) -> BmcConfig:
    b, m, t = cfg.bmc, cfg.model, cfg.training
    return BmcConfig(
        experts_per_step=b.experts_per_step,
        coefficients=LossCoefficients(
            stability=b.stability_coef, task=b.task_coef, consolidation=b.consolidation_coef
        ),
        expert_epochs=t.epochs_per_task,
        rehearsal_epochs=b.rehearsal_epochs,
        lr=t.lr,
        batch_size=t.batch_size,
        buffer_capacity=b.buffer_capacity,
        memory_capacity=b.memory_capacity,
        sampling=b.sampling,
        distill_kind=b.distill_kind,
        res_blocks=m.res_blocks,
        res_layers_per_block=m.res_layers_per_block,
        res_dim=m.res_dim,
        hidden_dim=m.hidden_dim,
        dropout_p=m.dropout_p,
        workers=b.workers if workers is None else workers,
    )


def to_baseline_config(cfg: ExperimentConfig) -> BaselineConfig:
    method = "sgd" if cfg.method == "multitask" else cfg.method
    b, m, t = cfg.baseline, cfg.model, cfg.training
    return BaselineConfig(
        method=method,
        epochs_per_task=t.epochs_per_task,
        lr=t.lr,
        batch_size=t.batch_size,
        memory_capacity=b.memory_capacity,
        replay_coef=b.replay_coef,
        penalty_coef=b.penalty_coef,
        gamma=b.gamma,
        res_blocks=m.res_blocks,
        res_layers_per_block=m.res_layers_per_block,
        res_dim=m.res_dim,
        hidden_dim=m.hidden_dim,
        dropout_p=m.dropout_p,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_SCHEMA = {
    "type": "object",
    "required": ["trials", "seed", "ranges", "base"],
    "additionalProperties": False,
    "properties": {
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "base": CONFIG_SCHEMA,
        "ranges": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "low": {"type": "number"},
                    "high": {"type": "number"},
                    "choices": {"type": "array", "minItems": 1},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class SweepSpec:
    """Uniform random search: each trial samples every range independently."""

    trials: int
    seed: int
    base: ExperimentConfig
    ranges: dict[str, dict]

    def __post_init__(self):
        base_dict = config_to_dict(self.base)
        for path, spec in self.ranges.items():
            node = base_dict
            for part in path.split("."):
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"sweep range targets unknown config key {path!r}")
                node = node[part]
            if "choices" in spec:
                if "low" in spec or "high" in spec:
                    raise ConfigError(f"range {path!r}: give either choices or low/high")
            elif "low" in spec and "high" in spec:
                if spec["low"] > spec["high"]:
                    raise ConfigError(f"range {path!r}: low > high")
            else:
                raise ConfigError(f"range {path!r}: needs low+high or choices")


def parse_sweep(raw: dict) -> SweepSpec:
    try:
        jsonschema.validate(raw, SWEEP_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<top level>"
        raise ConfigError(f"sweep spec invalid at {where}: {e.message}") from e
    return SweepSpec(
        trials=raw["trials"],
        seed=raw["seed"],
        base=parse_config(raw["base"]),
        ranges=raw["ranges"],
    )


def load_sweep(path: str | Path) -> SweepSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return parse_sweep(raw)
