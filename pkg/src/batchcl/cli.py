"""Experiment runner: single runs, random-search sweeps, Pareto export.

Output is line-delimited JSON (one self-describing object per line) so a
crashed run still leaves every completed record parseable; sweeps emit a
CSV next to the JSONL for plotting. The summary record contains only
deterministic fields — wall-clock timings live in a separate record — so
re-running the same config and seed in serial mode reproduces the summary
byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import multitask_bound, run_baseline
from .config import (
    ConfigError,
    ExperimentConfig,
    SweepSpec,
    build_stream,
    config_to_dict,
    load_config,
    load_sweep,
    parse_config,
    to_baseline_config,
    to_bmc_config,
)
from .protocol import RunReport, child_seed, cost_accuracy, run_full_stream, total_cost
from .streams import STREAM_KINDS, generate_stream, save_stream


def _json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True)


def _step_records(report: RunReport) -> list[dict]:
    cost_by_step = (
        {e.step_id: e.to_dict() for e in report.ledger.steps} if report.ledger else {}
    )
    out = []
    for rec in report.records:
        row = {"type": "step", **rec.to_dict()}
        if rec.step_id in cost_by_step:
            row["cost"] = cost_by_step[rec.step_id]
        out.append(row)
    return out


def _summary_record(cfg: ExperimentConfig, report: RunReport | None, bound: float | None) -> dict:
    summary: dict = {"type": "summary", "method": cfg.method, "seed": cfg.seed}
    if bound is not None:
        summary.update(n_steps=0, final_mean_acc=bound, final_backward_transfer=None,
                       failed_step=None)
        return summary
    summary.update(
        n_steps=len(report.records),
        final_mean_acc=report.final_mean_acc,
        final_backward_transfer=report.final_backward_transfer,
        failed_step=report.failed_step,
    )
    if report.records:
        summary["per_task_acc"] = {str(k): v for k, v in report.records[-1].per_task_acc.items()}
    if report.ledger and report.ledger.steps:
        t_c = total_cost(report.ledger)
        summary["total_cost"] = t_c
        summary["cost_accuracy"] = cost_accuracy(report.final_mean_acc, t_c)
    return summary


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    workers: int | None = None,
    time_reference: bool = False,
) -> tuple[int, dict]:
    """Execute one configured run and write records.jsonl + summary.json.

    Returns (exit code, summary). Exit 0 on success, 3 if a step failed
    mid-stream (partial records are still flushed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg.stream)

    reference_wall = None
    if time_reference and cfg.method != "sgd":
        ref_cfg = to_baseline_config(
            ExperimentConfig(method="sgd", seed=cfg.seed, stream=cfg.stream,
                             model=cfg.model, training=cfg.training)
        )
        t0 = time.perf_counter()
        run_baseline(stream, ref_cfg, cfg.seed)
        reference_wall = time.perf_counter() - t0

    bound = None
    report = None
    if cfg.method == "bmc":
        report = run_full_stream(stream, to_bmc_config(cfg, workers=workers), cfg.seed)
    elif cfg.method == "multitask":
        bound = multitask_bound(stream, to_baseline_config(cfg), cfg.seed)
    else:
        report = run_baseline(stream, to_baseline_config(cfg), cfg.seed)

    lines = _step_records(report) if report else []
    timing: dict = {"type": "timing", "wall_clock_s": report.wall_clock_s if report else 0.0}
    if reference_wall is not None and report is not None:
        timing["sgd_wall_clock_s"] = reference_wall
        timing["relative_time"] = report.wall_clock_s / reference_wall
    summary = _summary_record(cfg, report, bound)

    with open(out / "records.jsonl", "w") as fh:
        for row in lines:
            fh.write(_json_line(row) + "\n")
        fh.write(_json_line(timing) + "\n")
        fh.write(_json_line(summary) + "\n")
    (out / "summary.json").write_text(_json_line(summary) + "\n")
    failed = summary.get("failed_step") is not None
    return (3 if failed else 0), summary


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _set_path(raw: dict, dotted: str, value) -> None:
    node = raw
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def sample_trial(spec: SweepSpec, index: int) -> tuple[ExperimentConfig, dict]:
    """Pure function of (spec, trial index): sampled values and the config.

    The trial's run seed and its sampling randomness both derive from the
    sweep master seed and the index alone, so any trial can be reproduced
    in isolation.
    """
    rng = np.random.default_rng(child_seed(spec.seed, "sample", index))
    sampled: dict = {}
    raw = config_to_dict(spec.base)
    for path in sorted(spec.ranges):
        r = spec.ranges[path]
        if "choices" in r:
            value = r["choices"][int(rng.integers(len(r["choices"])))]
        else:
            value = float(rng.uniform(r["low"], r["high"]))
        sampled[path] = value
        _set_path(raw, path, value)
    raw["seed"] = child_seed(spec.seed, "trial", index)
    return parse_config(raw), sampled


def run_sweep(
    spec: SweepSpec, out_dir: str | Path, workers: int | None = None
) -> list[dict]:
    """Run every trial, collecting one row per trial; failures are recorded,
    not fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    with open(out / "sweep.jsonl", "w") as fh:
        for i in range(spec.trials):
            row: dict = {"type": "trial", "trial": i}
            try:
                cfg, sampled = sample_trial(spec, i)
                row.update(seed=cfg.seed, sampled=sampled)
                code, summary = run_experiment(cfg, out / f"trial-{i:04d}", workers=workers)
                row["status"] = "ok" if code == 0 else "failed_step"
                for key in ("final_mean_acc", "final_backward_transfer",
                            "total_cost", "cost_accuracy"):
                    if key in summary:
                        row[key] = summary[key]
            except Exception as e:  # a 629-trial campaign must survive one bad trial
                row.update(status="error", error=f"{type(e).__name__}: {e}")
            rows.append(row)
            fh.write(_json_line(row) + "\n")
            fh.flush()
    _write_sweep_csv(out / "sweep.csv", rows, sorted(spec.ranges))
    return rows


def _write_sweep_csv(path: Path, rows: list[dict], range_keys: list[str]) -> None:
    cols = ["trial", "seed", "status", *range_keys,
            "final_mean_acc", "final_backward_transfer", "total_cost", "cost_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            sampled = row.get("sampled", {})
            w.writerow(
                [row.get("trial"), row.get("seed"), row.get("status")]
                + [sampled.get(k, "") for k in range_keys]
                + [row.get("final_mean_acc", ""), row.get("final_backward_transfer", ""),
                   row.get("total_cost", ""), row.get("cost_accuracy", "")]
            )


# ---------------------------------------------------------------------------
# pareto export
# ---------------------------------------------------------------------------


def export_pareto(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated (total cost, mean accuracy) points, sorted by cost.

    A point is dominated when some other point has strictly lower cost AND
    strictly higher accuracy; duplicates collapse to one entry.
    """
    if not points:
        raise ValueError("no points to filter")
    uniq = sorted({(float(c), float(a)) for c, a in points})
    frontier: list[tuple[float, float]] = []
    best_prev = float("-inf")  # best accuracy among strictly cheaper points
    i = 0
    while i < len(uniq):
        j = i
        while j < len(uniq) and uniq[j][0] == uniq[i][0]:
            if uniq[j][1] >= best_prev:
                frontier.append(uniq[j])
            j += 1
        best_prev = max(best_prev, max(a for _, a in uniq[i:j]))
        i = j
    return frontier


def _collect_points(pattern: str) -> list[tuple[float, float]]:
    points = []
    for name in sorted(globlib.glob(pattern, recursive=True)):
        for line in Path(name).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if not isinstance(obj, dict) or "total_cost" not in obj:
                continue
            acc = obj.get("final_mean_acc", obj.get("mean_acc"))
            if acc is not None:
                points.append((obj["total_cost"], acc))
    return points


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchcl", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="execute one experiment config")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out-dir", default=None, help="override the output directory")
    run.add_argument("--serial", action="store_true",
                     help="force deterministic single-worker execution")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--time-reference", action="store_true",
                     help="also run sequential fine-tuning to report relative time")

    sweep = sub.add_parser("sweep", help="uniform random-search over a config")
    sweep.add_argument("spec", help="path to a JSON sweep spec")
    sweep.add_argument("--out-dir", default=None)
    sweep.add_argument("--serial", action="store_true")
    sweep.add_argument("--workers", type=int, default=None)

    pareto = sub.add_parser("pareto", help="export the cost/accuracy frontier")
    pareto.add_argument("pattern", help="glob of summary/sweep JSONL files")
    pareto.add_argument("--out", default=None, help="write CSV here instead of stdout")

    gen = sub.add_parser("gen-stream", help="generate and save a task stream")
    gen.add_argument("kind", choices=list(STREAM_KINDS))
    gen.add_argument("out", help="output file path")
    gen.add_argument("--n-tasks", type=int, required=True)
    gen.add_argument("--classes-per-task", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--train-per-task", type=int, required=True)
    gen.add_argument("--val-per-task", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--separation", type=float, default=3.0)
    return p


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = parse_config({**config_to_dict(cfg), "seed": args.seed})
    workers = 1 if args.serial else args.workers
    out_dir = args.out_dir or cfg.out_dir
    try:
        code, summary = run_experiment(cfg, out_dir, workers=workers,
                                       time_reference=args.time_reference)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(_json_line(summary))
    return code


def _cmd_sweep(args) -> int:
    try:
        spec = load_sweep(args.spec)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    workers = 1 if args.serial else args.workers
    out_dir = args.out_dir or spec.base.out_dir
    rows = run_sweep(spec, out_dir, workers=workers)
    ok = sum(1 for r in rows if r.get("status") == "ok")
    print(f"{ok}/{len(rows)} trials ok; results under {out_dir}")
    return 0


def _cmd_pareto(args) -> int:
    points = _collect_points(args.pattern)
    try:
        frontier = export_pareto(points)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    lines = ["total_cost,mean_acc"] + [f"{c},{a}" for c, a in frontier]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen_stream(args) -> int:
    try:
        stream = generate_stream(
            args.kind,
            n_tasks=args.n_tasks,
            classes_per_task=args.classes_per_task,
            dim=args.dim,
            train_per_task=args.train_per_task,
            val_per_task=args.val_per_task,
            seed=args.seed,
            separation=args.separation,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    save_stream(stream, args.out)
    print(f"wrote {len(stream.tasks)} tasks to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "pareto": _cmd_pareto,
        "gen-stream": _cmd_gen_stream,
    }[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
