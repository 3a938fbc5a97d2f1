"""Residual MLP classifier with intermediate-representation taps.

The network is the unit every other module works on: experts and the
base model are instances of the same architecture, distillation compares
their taps, and ParamVector is the only form in which parameters cross a
worker boundary.

Architecture (all affine layers followed by batch norm, then ReLU):

    x -> stem affine -> BN -> ReLU -> dropout
      -> res_blocks x [ block input h;
                        res_layers x (affine -> BN -> ReLU -> dropout);
                        output h + stack(h) ]          <- one tap per block
      -> penultimate affine -> BN -> ReLU              <- final tap
      -> dropout -> head affine -> logits

Taps are the residual-block outputs plus the penultimate activation
(``res_blocks + 1`` in total). Logits are deliberately not a tap; the
logit-space distillation alternative consumes them directly instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    GraphError,
    Tensor,
    add,
    batch_norm,
    dropout,
    matmul,
    relu,
)

PARAM_VECTOR_MAGIC = b"CLPV"
PARAM_VECTOR_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the residual classifier. Defaults follow the reference setup."""

    input_dim: int
    total_classes: int
    res_blocks: int = 2
    res_layers_per_block: int = 3
    res_dim: int = 256
    hidden_dim: int = 128
    dropout_p: float = 0.3

    def __post_init__(self):
        for name in (
            "input_dim",
            "total_classes",
            "res_blocks",
            "res_layers_per_block",
            "res_dim",
            "hidden_dim",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class TapSet:
    """One forward pass: intermediate representations plus logits.

    ``taps`` are live graph nodes, in depth order; ``logits`` covers every
    class registered so far.
    """

    taps: list[Tensor]
    logits: Tensor


@dataclass(frozen=True)
class ParamVector:
    """Flat snapshot of a model's full inference state.

    Entries keep a stable order (build order) and include normalization
    running statistics, so loading a ParamVector reproduces the source
    model's eval-mode behavior exactly. This is the only format in which
    parameters are serialized, broadcast, or uploaded.
    """

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        for name, a in zip(self.names, self.arrays):
            if a.dtype != np.float32:
                raise ValueError(f"entry '{name}' is {a.dtype}, expected float32")

    def to_bytes(self) -> bytes:
        """Little-endian binary form.

        Header: magic ``CLPV``, version u16, entry count u32; per entry a
        name (u16 length + UTF-8 bytes), rank u8, and dims (u32 each).
        Payload: the float32 arrays concatenated in entry order.
        """
        out = [PARAM_VECTOR_MAGIC, struct.pack("<HI", PARAM_VECTOR_VERSION, len(self.names))]
        for name, a in zip(self.names, self.arrays):
            nb = name.encode()
            out.append(struct.pack("<H", len(nb)))
            out.append(nb)
            out.append(struct.pack("<B", a.ndim))
            out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        for a in self.arrays:
            out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        if blob[:4] != PARAM_VECTOR_MAGIC:
            raise ValueError(f"bad magic {blob[:4]!r}, expected {PARAM_VECTOR_MAGIC!r}")
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != PARAM_VECTOR_VERSION:
            raise ValueError(f"unsupported version {version}")
        off = 10
        names: list[str] = []
        shapes: list[tuple[int, ...]] = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            names.append(blob[off : off + nlen].decode())
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            shapes.append(shape)
        arrays = []
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape)) if shape else 1
            end = off + 4 * n
            if end > len(blob):
                raise ValueError(
                    f"truncated payload for entry '{name}' at byte {off}"
                )
            arrays.append(
                np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            )
            off = end
        return cls(tuple(names), tuple(arrays))

    @property
    def nbytes(self) -> int:
        """Exact serialized size; the quantity the cost ledger charges for."""
        header = 10 + sum(
            2 + len(n.encode()) + 1 + 4 * a.ndim
            for n, a in zip(self.names, self.arrays)
        )
        return header + 4 * sum(a.size for a in self.arrays)

    @property
    def num_floats(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def same_bytes(self, other: "ParamVector") -> bool:
        return self.to_bytes() == other.to_bytes()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class ResidualClassifier:
    """The shared backbone. Single-owner: never share an instance across workers.

    ``params`` holds the learnable arrays, ``stats`` the normalization
    running buffers; both are snapshotted together by
    :meth:`to_param_vector`.
    """

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.classes = config.total_classes
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        self._add_affine_bn(rng, "stem", config.input_dim, config.res_dim)
        for b in range(config.res_blocks):
            for l in range(config.res_layers_per_block):
                self._add_affine_bn(
                    rng, f"block{b}.layer{l}", config.res_dim, config.res_dim
                )
        self._add_affine_bn(rng, "penult", config.res_dim, config.hidden_dim)
        self.params["head.W"] = xavier_uniform(
            rng, config.hidden_dim, self.classes, (config.hidden_dim, self.classes)
        )
        self.params["head.b"] = np.zeros(self.classes, dtype=np.float32)

    def _add_affine_bn(self, rng, prefix: str, d_in: int, d_out: int) -> None:
        self.params[f"{prefix}.W"] = xavier_uniform(rng, d_in, d_out, (d_in, d_out))
        self.params[f"{prefix}.b"] = np.zeros(d_out, dtype=np.float32)
        self.params[f"{prefix}.bn.gamma"] = np.ones(d_out, dtype=np.float32)
        self.params[f"{prefix}.bn.beta"] = np.zeros(d_out, dtype=np.float32)
        self.stats[f"{prefix}.bn.running_mean"] = np.zeros(d_out, dtype=np.float32)
        self.stats[f"{prefix}.bn.running_var"] = np.ones(d_out, dtype=np.float32)

    @property
    def tap_count(self) -> int:
        return self.config.res_blocks + 1

    @property
    def param_count(self) -> int:
        """Learnable scalars only (running statistics excluded)."""
        return int(sum(a.size for a in self.params.values()))

    def _layer(
        self, h, prefix: str, leaves, train: bool, rng, p_drop: float, update_running: bool
    ):
        w = leaves[f"{prefix}.W"]
        b = leaves[f"{prefix}.b"]
        gamma = leaves[f"{prefix}.bn.gamma"]
        beta = leaves[f"{prefix}.bn.beta"]
        h = add(matmul(h, w, name=f"{prefix}.W"), b, name=f"{prefix}.b")
        h = batch_norm(
            h,
            gamma,
            beta,
            self.stats[f"{prefix}.bn.running_mean"],
            self.stats[f"{prefix}.bn.running_var"],
            train=train,
            name=f"{prefix}.bn",
            update_running=update_running,
        )
        h = relu(h, name=f"{prefix}.relu")
        if p_drop > 0:
            h = dropout(h, p_drop, rng, train, name=f"{prefix}.dropout")
        return h

    def forward_with_taps(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[TapSet, dict[str, Tensor]]:
        """Run the network, returning the TapSet and the parameter leaves.

        The leaves map parameter names to the graph nodes of this pass;
        hand it to ``loss_and_grads`` to differentiate any loss built on
        the returned taps/logits. Train mode updates normalization running
        statistics in place and draws dropout masks from ``rng``.
        """
        return self._run(x, train=train, rng=rng, update_running=train, p=self.config.dropout_p)

    def forward_as_teacher(self, x: np.ndarray) -> TapSet:
        """Distillation-target pass: batch statistics, no dropout, no mutation.

        Teachers must see the same normalization statistics as the train-mode
        student they supervise, otherwise identical parameters would not give
        identical taps and the distillation distance would never reach zero.
        Running buffers are left untouched and no randomness is consumed.
        """
        tapset, _ = self._run(x, train=True, rng=None, update_running=False, p=0.0)
        return tapset

    def _run(
        self,
        x: np.ndarray,
        train: bool,
        rng: np.random.Generator | None,
        update_running: bool,
        p: float,
    ) -> tuple[TapSet, dict[str, Tensor]]:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise GraphError(
                f"input shape {x.shape} does not match input_dim={self.config.input_dim}"
            )
        leaves = {
            name: Tensor(arr, requires_grad=True, name=name)
            for name, arr in self.params.items()
        }
        # graphs run in whatever precision the parameters carry (float32 in
        # production; tests build float64 twins for derivative oracles)
        dtype = self.params["stem.W"].dtype
        h = self._layer(
            Tensor(x.astype(dtype, copy=False)), "stem", leaves, train, rng, p, update_running
        )
        taps: list[Tensor] = []
        for bidx in range(self.config.res_blocks):
            r = h
            for lidx in range(self.config.res_layers_per_block):
                r = self._layer(
                    r, f"block{bidx}.layer{lidx}", leaves, train, rng, p, update_running
                )
            h = add(h, r, name=f"block{bidx}.skip")
            taps.append(h)
        pen = self._layer(h, "penult", leaves, train, rng, 0.0, update_running)
        taps.append(pen)
        head_in = dropout(pen, p, rng, train, name="head.dropout") if p > 0 else pen
        logits = add(
            matmul(head_in, leaves["head.W"], name="head.W"),
            leaves["head.b"],
            name="head.b",
        )
        return TapSet(taps=taps, logits=logits), leaves

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode argmax over every registered class (ties -> lowest id)."""
        tapset, _ = self.forward_with_taps(x, train=False)
        return np.argmax(tapset.logits.data, axis=1)

    def grow_head(self, new_class_count: int, rng: np.random.Generator) -> None:
        """Widen the head to ``new_class_count`` outputs.

        Existing class weights and biases are kept bit-exactly, so old-class
        logits are unchanged for any input; new columns are Xavier-drawn
        against the widened fan-out.
        """
        if new_class_count <= self.classes:
            raise ValueError(
                f"head can only grow: have {self.classes}, requested {new_class_count}"
            )
        extra = new_class_count - self.classes
        new_w = xavier_uniform(
            rng,
            self.config.hidden_dim,
            new_class_count,
            (self.config.hidden_dim, extra),
        )
        self.params["head.W"] = np.concatenate([self.params["head.W"], new_w], axis=1)
        self.params["head.b"] = np.concatenate(
            [self.params["head.b"], np.zeros(extra, dtype=np.float32)]
        )
        self.classes = new_class_count

    def to_param_vector(self) -> ParamVector:
        names = tuple(self.params) + tuple(self.stats)
        arrays = tuple(a.copy() for a in self.params.values()) + tuple(
            a.copy() for a in self.stats.values()
        )
        return ParamVector(names, arrays)

    def load_param_vector(self, pv: ParamVector) -> None:
        """Overwrite all state from a snapshot (shapes must match exactly)."""
        incoming = dict(zip(pv.names, pv.arrays))
        expected = set(self.params) | set(self.stats)
        if set(incoming) != expected:
            missing = expected - set(incoming)
            extra = set(incoming) - expected
            raise ValueError(
                f"layout mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, arr in incoming.items():
            target = self.params if name in self.params else self.stats
            if target[name].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': {target[name].shape} vs {arr.shape}"
                )
            target[name] = arr.copy()

    def copy(self) -> "ResidualClassifier":
        clone = ResidualClassifier.__new__(ResidualClassifier)
        clone.config = self.config
        clone.classes = self.classes
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.stats = {k: v.copy() for k, v in self.stats.items()}
        return clone


def build_model(config: ModelConfig, seed: int) -> ResidualClassifier:
    """Deterministic constructor: same config and seed give identical bytes."""
    return ResidualClassifier(config, seed)


def model_from_vector(config: ModelConfig, pv: ParamVector) -> ResidualClassifier:
    """Materialize a model from a snapshot, inferring the current head width.

    This is how a worker reconstructs the base model it was sent, and how
    the coordinator rebuilds expert teachers from uploaded artifacts.
    """
    entries = dict(zip(pv.names, pv.arrays))
    if "head.b" not in entries:
        raise ValueError("snapshot has no head; not a classifier ParamVector")
    classes = int(entries["head.b"].size)
    m = ResidualClassifier(config, seed=0)
    if classes != m.classes:
        m.params["head.W"] = np.zeros((config.hidden_dim, classes), dtype=np.float32)
        m.params["head.b"] = np.zeros(classes, dtype=np.float32)
        m.classes = classes
    m.load_param_vector(pv)
    return m
