"""Class-incremental protocol: task streams, accuracy matrix, metrics, runs.

A run trains tasks one at a time and after each task evaluates every task seen
so far, filling one row of the accuracy matrix ``R`` where ``R[j, i]`` is the
accuracy on task ``i``'s test split after training tasks ``1..j``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_model
from .config import Config, dump_config
from .data import ClipSet, ingest_folder, make_sprite_dataset, split_train_test
from .errors import DataError, ProtocolError, UndefinedMetricError
from .model import DPATModel
from .trainer import evaluate, train_task

log = logging.getLogger(__name__)

STATUS_FILE = "STATUS"


@dataclass
class TaskData:
    task: int  # 1-based
    classes: list  # original dataset labels, in head order
    train: ClipSet  # labels remapped to head indices
    test: ClipSet

    @property
    def head_classes(self) -> list:
        return sorted(set(int(c) for c in self.train.labels) | set(int(c) for c in self.test.labels))


@dataclass
class TaskStream:
    tasks: list
    class_order: list  # original label of head index i

    def __len__(self):
        return len(self.tasks)

    def cumulative(self, t: int) -> list:
        """Head indices of every class introduced by tasks ``1..t``."""
        return [c for task in self.tasks[:t] for c in task.head_classes]

    def check(self) -> None:
        seen: set = set()
        for task in self.tasks:
            own = set(task.classes)
            if own & seen:
                raise ProtocolError(f"task {task.task} repeats classes {sorted(own & seen)}")
            seen |= own
            lo = len(seen) - len(own)
            allowed = set(range(lo, len(seen)))
            for split in (task.train, task.test):
                if not set(int(c) for c in split.labels) <= allowed:
                    raise ProtocolError(f"task {task.task} holds samples outside its classes")


def build_task_stream(dataset: tuple[ClipSet, ClipSet], n_tasks: int, seed: int) -> TaskStream:
    """Split ``(train, test)`` into ``n_tasks`` equal, disjoint, seed-shuffled class groups.

    Labels are remapped so task ``t`` owns head indices ``(t-1)*k .. t*k-1``.
    """
    train, test = dataset
    classes = np.unique(np.concatenate([train.labels, test.labels]))
    if n_tasks < 1 or len(classes) % n_tasks:
        raise ProtocolError(f"{len(classes)} classes cannot be split into {n_tasks} equal tasks")
    order = [int(c) for c in classes[np.random.default_rng(seed).permutation(len(classes))]]
    remap = {c: i for i, c in enumerate(order)}
    per = len(classes) // n_tasks
    tasks = []
    for t in range(n_tasks):
        group = order[t * per:(t + 1) * per]
        parts = []
        for split in (train, test):
            idx = np.flatnonzero(np.isin(split.labels, group))
            labels = np.asarray([remap[int(c)] for c in split.labels[idx]], dtype=np.int64)
            names = [split.class_names[c] for c in group] if split.class_names else []
            parts.append(ClipSet(split.pixels[idx], labels, names))
        tasks.append(TaskData(t + 1, group, parts[0], parts[1]))
    stream = TaskStream(tasks, order)
    stream.check()
    return stream


class AccuracyMatrix:
    """Lower-triangular ``N x N`` accuracy table; unfilled entries are NaN."""

    def __init__(self, n: int):
        self.n = n
        self.values = np.full((n, n), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got {arr.shape}")
        R = cls(arr.shape[0])
        for j in range(R.n):
            for i in range(j + 1):
                R.set(j + 1, i + 1, arr[j, i])
        return R

    def set(self, after_task: int, task: int, acc: float) -> None:
        if not 1 <= task <= after_task <= self.n:
            raise IndexError(f"R[{after_task}][{task}] is outside the lower triangle of a {self.n}-task matrix")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[after_task - 1, task - 1] = acc

    def get(self, after_task: int, task: int) -> float:
        return float(self.values[after_task - 1, task - 1])

    def complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.n)]).any()

    def curve(self) -> list:
        """Mean accuracy over seen tasks after each task (rows filled so far)."""
        out = []
        for j in range(self.n):
            row = self.values[j, :j + 1]
            if np.isnan(row).any():
                break
            out.append(float(row.mean()))
        return out


def _as_array(R) -> np.ndarray:
    return R.values if isinstance(R, AccuracyMatrix) else np.asarray(R, dtype=np.float64)


def compute_acc(R) -> float:
    arr = _as_array(R)
    last = arr[-1]
    if np.isnan(last).any():
        raise UndefinedMetricError("final row of the accuracy matrix is incomplete")
    return float(last.mean())


def compute_metrics(R) -> tuple[float, float]:
    """``(Acc, BWF)``: final-row mean and mean drop from just-learned to final accuracy."""
    arr = _as_array(R)
    n = arr.shape[0]
    if n < 2:
        raise UndefinedMetricError("backward forgetting needs at least two tasks")
    if np.isnan(arr[np.tril_indices(n)]).any():
        raise UndefinedMetricError("accuracy matrix is not populated through the final task")
    acc = compute_acc(arr)
    bwf = float(np.mean([arr[i, i] - arr[n - 1, i] for i in range(n - 1)]))
    return acc, bwf


# ---------------------------------------------------------------------------
# datasets and runs


def _seed(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed, *salt]).generate_state(1)[0])


def load_dataset(cfg: Config) -> tuple[ClipSet, ClipSet]:
    """Build ``(train, test)`` from ``cfg.data``: synthetic sprites or a frame folder."""
    d, m = cfg.data, cfg.model
    if d.dataset == "sprites":
        kw = dict(shapes=d.shapes, motions=d.motions, T=m.frames, H=m.height, W=m.width, channels=m.channels,
                  size=d.sprite_size, speed=d.speed, noise=d.noise)
        train = make_sprite_dataset(per_class=d.train_per_class, seed=_seed(cfg.seed, 1), **kw)
        test = make_sprite_dataset(per_class=d.test_per_class, seed=_seed(cfg.seed, 2), **kw)
        return train, test
    clips = ingest_folder(d.dataset, m.frames)
    geometry = clips.pixels.shape[2:]
    if geometry != (m.height, m.width, m.channels):
        raise DataError(f"frames are {geometry}, model expects {(m.height, m.width, m.channels)}")
    return split_train_test(clips, d.test_fraction, _seed(cfg.seed, 3))


def check_access_log(events: list) -> None:
    """Assert no evaluation or training ever touched data from a later task."""
    trained = 0
    for kind, after, task in events:
        if kind == "train":
            if task != trained + 1:
                raise ProtocolError(f"task {task} trained out of order")
            trained = task
        elif kind == "eval" and (after != trained or task > trained):
            raise ProtocolError(f"evaluation of task {task} after task {after} breaks the protocol")


def evaluate_seen(model: DPATModel, stream: TaskStream, upto: int, batch_size: int = 128, on_access=None):
    """Accuracy and selected task ids for tasks ``1..upto`` (no task identity given)."""
    accs, selected = [], []
    for task in stream.tasks[:upto]:
        if on_access:
            on_access(task.task)
        preds, sel = evaluate(model, task.test.pixels, batch_size=batch_size)
        accs.append(float((preds == task.test.labels).mean()) if len(preds) else float("nan"))
        selected.append(sel)
    return accs, selected


@dataclass
class Report:
    fingerprint: str
    R: AccuracyMatrix
    acc: Optional[float] = None
    bwf: Optional[float] = None
    matching_acc: Optional[float] = None
    matching_per_task: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    train_log: list = field(default_factory=list)
    access_log: list = field(default_factory=list)
    complete: bool = False

    def metrics_rows(self) -> list:
        fmt = lambda v: "undefined" if v is None else repr(float(v))  # noqa: E731
        rows = [("fingerprint", self.fingerprint), ("tasks", str(self.R.n)), ("acc", fmt(self.acc)),
                ("bwf", fmt(self.bwf)), ("matching_acc", fmt(self.matching_acc))]
        rows += [(f"matching_acc_task{t + 1}", fmt(v)) for t, v in enumerate(self.matching_per_task)]
        rows += [(f"curve_task{t + 1}", fmt(v)) for t, v in enumerate(self.curve)]
        return rows


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_report(report: Report, out, cfg: Config, status: str) -> Path:
    from .plotting import plot_learning_curves

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_csv([("metric", "value"), *report.metrics_rows()]))
    header = ["after_task"] + [f"task{i + 1}" for i in range(report.R.n)]
    rows = [[j + 1] + ["" if np.isnan(v) else repr(float(v)) for v in report.R.values[j]] for j in range(report.R.n)]
    (out / "R.csv").write_text(_csv([header, *rows]))
    (out / "curve.csv").write_text(_csv([("task", "mean_acc"), *[(t + 1, repr(v)) for t, v in enumerate(report.curve)]]))
    (out / "fingerprint.txt").write_text(report.fingerprint + "\n")
    (out / "config.yaml").write_text(dump_config(cfg))
    (out / "train_log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in report.train_log))
    if report.curve:
        plot_learning_curves([(report.fingerprint, report.curve)], out / "learning_curve.png")
    (out / STATUS_FILE).write_text(status + "\n")
    return out


def run_experiment(
    cfg: Config,
    out: Optional[str | Path] = None,
    dataset: Optional[tuple[ClipSet, ClipSet]] = None,
    progress: Optional[Callable[[str], None]] = None,
    checkpoints: bool = True,
) -> Report:
    """Train the stream task by task, filling ``R`` row by row.

    With ``out`` set, the report directory is rewritten after every task and
    marked ``partial`` until the run completes (``failed`` on an exception).
    """
    cfg.validate()
    stream = build_task_stream(dataset or load_dataset(cfg), cfg.data.tasks, cfg.seed)
    n = len(stream)
    model = DPATModel(cfg)
    report = Report(cfg.fingerprint(), AccuracyMatrix(n))
    selected: list = []
    try:
        for task in stream.tasks:
            t = task.task
            report.access_log.append(("train", t, t))
            train_task(model, task.train.pixels, task.train.labels, task.head_classes, cfg, log=report.train_log.append)
            accs, selected = evaluate_seen(
                model, stream, t, on_access=lambda i, t=t: report.access_log.append(("eval", t, i)))
            for i, a in enumerate(accs):
                report.R.set(t, i + 1, a)
            report.curve = report.R.curve()
            if progress:
                progress(f"task {t}/{n}: " + " ".join(f"{a:.3f}" for a in accs))
            if out is not None:
                if checkpoints:
                    save_model(Path(out) / "checkpoints" / f"task-{t}", model, t, "end")
                write_report(report, out, cfg, "partial")
        check_access_log(report.access_log)
        per_task = [float((s == i + 1).mean()) for i, s in enumerate(selected)]
        hits = np.concatenate([s == i + 1 for i, s in enumerate(selected)])
        report.matching_per_task = per_task
        report.matching_acc = float(hits.mean())
        report.acc = compute_acc(report.R)
        try:
            report.bwf = compute_metrics(report.R)[1]
        except UndefinedMetricError:
            report.bwf = None
        report.complete = True
    except Exception as exc:
        if out is not None:
            write_report(report, out, cfg, f"failed: {type(exc).__name__}: {exc}")
        raise
    if out is not None:
        write_report(report, out, cfg, "complete")
    return report


def read_curve(run_dir) -> tuple[str, list]:
    """``(fingerprint, per-task mean accuracies)`` from a report directory."""
    run_dir = Path(run_dir)
    try:
        fp = (run_dir / "fingerprint.txt").read_text().strip()
        with open(run_dir / "curve.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
    except OSError as exc:
        raise DataError(f"{run_dir} is not a report directory: {exc}") from exc
    return fp, [float(v) for _, v in rows]


def read_matrix(run_dir) -> np.ndarray:
    with open(Path(run_dir) / "R.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows])
