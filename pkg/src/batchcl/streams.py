"""Task streams and class-incremental evaluation.

A stream is an ordered list of tasks with pairwise-disjoint global class
ids. Two synthetic generators are provided — ``permuted`` (one base
dataset seen through per-task input permutations, the classic forgetting
benchmark) and ``split_synthetic`` (fresh Gaussian clusters per task) —
plus a binary file format so externally extracted feature datasets can be
ingested without this package knowing how they were produced.

Evaluation is strictly class-incremental: the predictor sees a feature
vector and answers with a class id from the union of everything learned
so far; task identity never reaches the model at test time.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

STREAM_MAGIC = b"CLFS"
STREAM_VERSION = 1

STREAM_KINDS = ("permuted", "split_synthetic")


class StreamFormatError(ValueError):
    """Malformed stream file (bad magic/version, truncation, inconsistent dims)."""


@dataclass(frozen=True)
class Task:
    """One labeled dataset with an exclusive global class-id range."""

    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    class_lo: int
    class_hi: int  # exclusive

    def __post_init__(self):
        if len(self.val_y) == 0:
            raise ValueError(f"task {self.task_id}: validation split is empty")
        if self.train_x.shape[1] != self.val_x.shape[1]:
            raise ValueError(f"task {self.task_id}: train/val dim mismatch")
        for y in (self.train_y, self.val_y):
            if len(y) and (y.min() < self.class_lo or y.max() >= self.class_hi):
                raise ValueError(
                    f"task {self.task_id}: labels outside [{self.class_lo}, {self.class_hi})"
                )

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_hi - self.class_lo


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]

    def __post_init__(self):
        ranges = [(t.class_lo, t.class_hi) for t in self.tasks]
        for i, (lo_a, hi_a) in enumerate(ranges):
            for lo_b, hi_b in ranges[i + 1 :]:
                if lo_a < hi_b and lo_b < hi_a:
                    raise ValueError("task class ranges overlap")
        dims = {t.dim for t in self.tasks}
        if len(dims) > 1:
            raise ValueError(f"tasks disagree on feature dim: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    @property
    def total_classes(self) -> int:
        return max(t.class_hi for t in self.tasks)


def _sample_clusters(
    rng: np.random.Generator,
    means: np.ndarray,
    count: int,
) -> tuple[np.ndarray, np.ndarray]:
    """``count`` points split as evenly as possible over the cluster means."""
    c = len(means)
    per = np.full(c, count // c)
    per[: count % c] += 1
    xs, ys = [], []
    for cls, n in enumerate(per):
        xs.append(means[cls] + rng.standard_normal((n, means.shape[1])))
        ys.append(np.full(n, cls, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def generate_stream(
    kind: str,
    n_tasks: int,
    classes_per_task: int,
    dim: int,
    train_per_task: int,
    val_per_task: int,
    seed: int,
    separation: float = 3.0,
) -> TaskStream:
    """Build a synthetic stream.

    ``permuted``: one base Gaussian-cluster dataset; task t applies a fixed
    random permutation of input coordinates (task 0 is the identity) and
    remaps labels to a fresh class-id block, so n_tasks x classes_per_task
    global classes exist in total. ``split_synthetic``: every task draws
    brand-new cluster means; ``separation`` scales how far apart class
    means sit (0 makes all classes indistinguishable).
    """
    if kind not in STREAM_KINDS:
        raise ValueError(f"unknown stream kind {kind!r}; expected one of {STREAM_KINDS}")
    if min(n_tasks, classes_per_task, dim, train_per_task, val_per_task) < 1:
        raise ValueError("all stream size parameters must be >= 1")
    if classes_per_task > train_per_task or classes_per_task > val_per_task:
        raise ValueError("need at least one example per class in each split")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    rng = np.random.default_rng(seed)
    tasks = []
    if kind == "permuted":
        means = rng.standard_normal((classes_per_task, dim)) * separation
        base_train_x, base_train_y = _sample_clusters(rng, means, train_per_task)
        base_val_x, base_val_y = _sample_clusters(rng, means, val_per_task)
        for t in range(n_tasks):
            perm = np.arange(dim) if t == 0 else rng.permutation(dim)
            lo = t * classes_per_task
            tasks.append(
                Task(
                    task_id=t,
                    train_x=base_train_x[:, perm],
                    train_y=base_train_y + lo,
                    val_x=base_val_x[:, perm],
                    val_y=base_val_y + lo,
                    class_lo=lo,
                    class_hi=lo + classes_per_task,
                )
            )
    else:
        for t in range(n_tasks):
            means = rng.standard_normal((classes_per_task, dim)) * separation
            train_x, train_y = _sample_clusters(rng, means, train_per_task)
            val_x, val_y = _sample_clusters(rng, means, val_per_task)
            lo = t * classes_per_task
            tasks.append(
                Task(
                    task_id=t,
                    train_x=train_x,
                    train_y=train_y + lo,
                    val_x=val_x,
                    val_y=val_y + lo,
                    class_lo=lo,
                    class_hi=lo + classes_per_task,
                )
            )
    return TaskStream(tasks=tuple(tasks))


# ---------------------------------------------------------------------------
# binary stream files
#
# Little-endian layout:
#   magic "CLFS" | version u16 | task count u32
#   per task: task id u32 | class count u32 | dim u32
#             | train count u64 | val count u64
#             | train rows | val rows
#   row: dim x float32 features | class id u32
# ---------------------------------------------------------------------------


def _row_dtype(dim: int) -> np.dtype:
    return np.dtype([("x", "<f4", (dim,)), ("y", "<u4")])


def save_stream(stream: TaskStream, path: str) -> None:
    with open(path, "wb") as f:
        f.write(STREAM_MAGIC)
        f.write(struct.pack("<HI", STREAM_VERSION, len(stream)))
        for t in stream.tasks:
            f.write(
                struct.pack(
                    "<IIIQQ",
                    t.task_id,
                    t.num_classes,
                    t.dim,
                    len(t.train_y),
                    len(t.val_y),
                )
            )
            for x, y in ((t.train_x, t.train_y), (t.val_x, t.val_y)):
                rows = np.empty(len(y), dtype=_row_dtype(t.dim))
                rows["x"] = x
                rows["y"] = y
                f.write(rows.tobytes())


def load_feature_stream(path: str) -> TaskStream:
    """Read a stream file, validating structure and re-basing class ids if needed.

    Tasks materialize in file order. If any two tasks' class-id sets
    overlap, every task's ids are remapped deterministically (file order,
    ascending original id) onto consecutive global blocks, and the remap is
    reported through the module logger.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != STREAM_MAGIC:
        raise StreamFormatError(
            f"bad magic {blob[:4]!r} at byte 0, expected {STREAM_MAGIC!r}"
        )
    try:
        version, n_tasks = struct.unpack_from("<HI", blob, 4)
    except struct.error:
        raise StreamFormatError("truncated header at byte 4") from None
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    off = 10
    raw = []
    dim0: int | None = None
    for i in range(n_tasks):
        if off + 28 > len(blob):
            raise StreamFormatError(f"truncated task header at byte {off}")
        task_id, n_classes, dim, n_train, n_val = struct.unpack_from("<IIIQQ", blob, off)
        off += 28
        if dim0 is None:
            dim0 = dim
        elif dim != dim0:
            raise StreamFormatError(
                f"task {task_id}: dim {dim} != stream dim {dim0} (header at byte {off - 28})"
            )
        rows_dt = _row_dtype(dim)
        splits = []
        for count in (n_train, n_val):
            nbytes = count * rows_dt.itemsize
            if off + nbytes > len(blob):
                raise StreamFormatError(f"truncated payload at byte {off}")
            rows = np.frombuffer(blob, dtype=rows_dt, count=count, offset=off)
            off += nbytes
            splits.append((rows["x"].copy(), rows["y"].astype(np.int64)))
        raw.append((task_id, n_classes, splits))
    if off != len(blob):
        raise StreamFormatError(f"{len(blob) - off} trailing bytes at byte {off}")

    class_sets = [set(np.unique(np.concatenate([s[1] for s in splits])))
                  for _, _, splits in raw]
    disjoint = all(
        not (class_sets[i] & class_sets[j])
        for i in range(len(raw))
        for j in range(i + 1, len(raw))
    )
    tasks = []
    next_lo = 0
    for (task_id, n_classes, splits), classes in zip(raw, class_sets):
        (train_x, train_y), (val_x, val_y) = splits
        if disjoint:
            lo, hi = int(min(classes)), int(max(classes)) + 1
        else:
            remap = {orig: next_lo + k for k, orig in enumerate(sorted(classes))}
            train_y = np.array([remap[v] for v in train_y], dtype=np.int64)
            val_y = np.array([remap[v] for v in val_y], dtype=np.int64)
            lo, hi = next_lo, next_lo + len(classes)
            next_lo = hi
            logger.info(
                "task %d: class ids overlap another task; re-based %d classes onto [%d, %d)",
                task_id, len(classes), lo, hi,
            )
        tasks.append(
            Task(
                task_id=task_id,
                train_x=train_x,
                train_y=train_y,
                val_x=val_x,
                val_y=val_y,
                class_lo=lo,
                class_hi=hi,
            )
        )
    return TaskStream(tasks=tuple(tasks))


# ---------------------------------------------------------------------------
# class-incremental evaluation and metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    """Evaluation snapshot taken after one incremental step."""

    step_id: int
    per_task_acc: dict[int, float]
    mean_acc: float
    first_task_acc: float
    backward_transfer: float | None = None
    wall_clock_s: float = 0.0
    relative_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "per_task_acc": {str(k): v for k, v in self.per_task_acc.items()},
            "mean_acc": self.mean_acc,
            "first_task_acc": self.first_task_acc,
            "backward_transfer": self.backward_transfer,
            "wall_clock_s": self.wall_clock_s,
            "relative_time": self.relative_time,
        }


def evaluate_cil(model, tasks_seen: list[Task]) -> dict[int, float]:
    """Per-task validation accuracy with prediction over ALL seen classes.

    The model answers with a global class id; a validation example counts
    as correct only when the argmax over every registered class lands on
    its label. No task mask is ever applied.
    """
    universe = max(t.class_hi for t in tasks_seen)
    if getattr(model, "classes", universe) < universe:
        raise ValueError(
            f"model head covers {model.classes} classes but stream has {universe}"
        )
    accs: dict[int, float] = {}
    for t in tasks_seen:
        pred = model.predict(t.val_x)
        accs[t.task_id] = float((pred == t.val_y).mean())
    return accs


def mean_accuracy(per_task_acc: dict[int, float]) -> float:
    return float(np.mean(list(per_task_acc.values())))


def backward_transfer(history: list[dict[int, float]]) -> float:
    """Average accuracy change since each task was learned (final step excluded).

    ``history[s]`` maps task id to accuracy after step s; a task's learning
    step is the first step it appears in. Tasks first learned at the final
    step are excluded (their drift is definitionally zero).
    """
    if len(history) < 2:
        raise ValueError("backward transfer needs at least two steps")
    final = history[-1]
    learned_at: dict[int, int] = {}
    for s, accs in enumerate(history):
        for tid in accs:
            learned_at.setdefault(tid, s)
    last = len(history) - 1
    drifts = [
        final[tid] - history[s][tid] for tid, s in learned_at.items() if s < last
    ]
    if not drifts:
        raise ValueError("no task was learned before the final step")
    return float(np.mean(drifts))


def first_task_curve(history: list[dict[int, float]]) -> list[float]:
    """Accuracy of the earliest-learned task after each step."""
    first = min(history[0])
    return [accs[first] for accs in history]
