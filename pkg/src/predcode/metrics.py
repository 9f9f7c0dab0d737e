"""Accuracy, AdaECE calibration, corruption shift studies and CSV/plot writers.

Confidences are the max softmax of the output layer. Argmax ties go to the
lowest class index.

CSV reports have a fixed column order, one header row and ``.`` as decimal
separator. When written through :func:`write_csv` with ``meta``, a single
leading ``#`` comment line carries provenance (library version, config
hash, seed); pass ``comment="#"`` to pandas or skip the first line.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_BINS = 15


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


@dataclasses.dataclass(frozen=True)
class PredictionBatch:
    logits: np.ndarray  # classes x samples
    labels: np.ndarray  # class indices

    def __post_init__(self):
        logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        labels = np.asarray(self.labels).astype(np.int64).ravel()
        if logits.shape[1] != labels.size:
            raise ShapeError(f"{logits.shape[1]} predictions but {labels.size} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[0]):
            raise ShapeError("label index out of range")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_onehot(cls, logits, onehot) -> "PredictionBatch":
        return cls(logits, np.argmax(np.asarray(onehot), axis=0))

    def __len__(self) -> int:
        return self.labels.size

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=0)

    @property
    def confidences(self) -> np.ndarray:
        return softmax(self.logits).max(axis=0)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels


def accuracy(preds: PredictionBatch) -> float:
    if len(preds) == 0:
        raise UsageError("accuracy of an empty batch")
    return float(np.mean(preds.correct))


@dataclasses.dataclass(frozen=True)
class CalibrationReport:
    ada_ece: float
    bin_confidence: tuple
    bin_accuracy: tuple
    bin_mass: tuple
    n_bins: int


def ada_ece_from(confidences, correct, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """AdaECE from raw confidences and 0/1 correctness.

    Samples are stably sorted by confidence and split into ``n_bins``
    contiguous bins whose sizes differ by at most one (larger bins first).
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    n = conf.size
    if n_bins < 1:
        raise UsageError("n_bins must be >= 1")
    if n < n_bins:
        raise UsageError(f"{n} samples cannot fill {n_bins} equal-mass bins")
    order = np.argsort(conf, kind="stable")
    bc, ba, bm = [], [], []
    total = 0.0
    for chunk in np.array_split(order, n_bins):
        c, a = float(conf[chunk].mean()), float(hit[chunk].mean())
        bc.append(c)
        ba.append(a)
        bm.append(int(chunk.size))
        total += abs(a - c) * chunk.size
    return CalibrationReport(total / n, tuple(bc), tuple(ba), tuple(bm), n_bins)


def ada_ece(preds: PredictionBatch, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    return ada_ece_from(preds.confidences, preds.correct, n_bins)


# -- shift study -----------------------------------------------------------------

SHIFT_COLUMNS = ("model", "corruption", "level", "accuracy", "ada_ece")


def shift_study(model, dataset, corruptions=None, levels=range(0, 6), seed: int = 0,
                n_bins: int = DEFAULT_BINS, name: str = "model") -> list[dict]:
    """Accuracy and AdaECE per (corruption, level), sorted by level then kind.

    ``model`` is a :class:`~predcode.network.PCNetwork` or any callable
    mapping an input matrix to output logits. Level 0 rows are the clean
    metrics and appear once per kind so each kind's series is complete.
    """
    from .data import Corruption, CorruptionKind, corrupt
    from .network import PCNetwork, forward

    if dataset.labels is None:
        raise UsageError("shift study needs a labelled dataset")
    predict = (lambda x: forward(model, x)) if isinstance(model, PCNetwork) else model
    kinds = list(CorruptionKind) if corruptions is None else [CorruptionKind(k) for k in corruptions]
    levels = sorted(set(int(v) for v in levels))
    labels = np.argmax(dataset.labels, axis=0)
    cache = {}
    rows = []
    for level in levels:
        for kind in kinds:
            key = None if level == 0 else (kind, level)
            if key not in cache:
                shifted = dataset if level == 0 else corrupt(dataset, Corruption(kind, level, seed))
                pb = PredictionBatch(predict(shifted.inputs), labels)
                cache[key] = (accuracy(pb), ada_ece(pb, n_bins).ada_ece)
            acc, ece = cache[key]
            rows.append({"model": name, "corruption": kind.value, "level": level,
                         "accuracy": acc, "ada_ece": ece})
    _warn_if_accuracy_rises(rows)
    return rows


def level_medians(rows, column: str) -> dict:
    by_level = {}
    for r in rows:
        by_level.setdefault(r["level"], []).append(r[column])
    return {lv: float(np.median(v)) for lv, v in sorted(by_level.items())}


def _warn_if_accuracy_rises(rows) -> None:
    med = list(level_medians(rows, "accuracy").items())
    for (l0, a0), (l1, a1) in zip(med, med[1:]):
        if a1 > a0:
            warnings.warn(f"median accuracy rises from level {l0} ({a0:.4f}) to {l1} ({a1:.4f})",
                          stacklevel=3)


# -- writers ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def csv_text(columns, rows, meta: dict | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def write_csv(path, columns, rows, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, meta))
    return path


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_gnuplot(path, series: dict, columns=("x", "y"), meta: dict | None = None) -> Path:
    """One whitespace-separated block per named series, separated by two blank lines
    so ``index N`` selects a series in gnuplot."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    if meta:
        out.append("# " + " ".join(f"{k}={v}" for k, v in meta.items()))
    blocks = []
    for name, pts in series.items():
        lines = [f'# "{name}"', "# " + " ".join(columns)]
        lines += [" ".join(_fmt(v) for v in p) for p in pts]
        blocks.append("\n".join(lines))
    out.append("\n\n\n".join(blocks))
    path.write_text("\n".join(out) + "\n")
    return path


ENERGY_COLUMNS = ("iteration", "smm", "energy")
LOSS_COLUMNS = ("update", "smm", "train_loss")
EPOCH_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc")


def report_tables(report) -> dict:
    """CSV-ready (columns, rows) for each trace in a :class:`TrainReport`."""
    energy = [(i, s, e) for i, (s, e) in enumerate(zip(report.iteration_smm, report.energy_trace))]
    loss = [(i, s, v) for i, (s, v) in enumerate(report.loss_trace)]
    n = max(len(report.epoch_train_loss), len(report.test_acc_trace))

    def at(seq, i):
        return seq[i] if i < len(seq) else None

    epochs = [(i, at(report.epoch_train_loss, i), at(report.epoch_train_acc, i),
               at(report.test_acc_trace, i)) for i in range(n)]
    return {"energy": (ENERGY_COLUMNS, energy), "loss": (LOSS_COLUMNS, loss),
            "epochs": (EPOCH_COLUMNS, epochs)}
