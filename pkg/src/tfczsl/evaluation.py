"""GZSL / continual-ZSL metrics.

Task-free protocol: seen accuracy SA, unseen accuracy UA and their harmonic
mean H on the standard test split, predicting over every class.

Task-agnostic protocol over T tasks, evaluated after each task t:
mSA averages per-class accuracy on tasks <= t restricted to those classes
(T terms), mUA on tasks > t restricted to those classes (T-1 terms), mH the
harmonic mean of seen/unseen accuracy predicted over all classes (T-1 terms).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .data import TaskSplit, ZslDataset
from .errors import DataError

log = logging.getLogger(__name__)

# predictor(features [n, d_x], allowed labels or None) -> labels [n]
Predictor = Callable[[np.ndarray, Optional[Sequence[int]]], np.ndarray]


def per_class_accuracy(predictions, truth, class_set) -> float:
    """Mean over ``class_set`` of each class's top-1 accuracy.

    Classes without test samples are skipped with a warning.
    """
    return float(_per_class_exact(predictions, truth, class_set))


def _per_class_exact(predictions, truth, class_set) -> Fraction:
    # Rational arithmetic so reported metrics are correctly rounded.
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise DataError("predictions and truth differ in length")
    classes = list(class_set)
    if not classes:
        raise DataError("empty class set")
    accs = []
    for c in classes:
        hit = truth == c
        total = int(hit.sum())
        if total == 0:
            log.warning("class %s has no test samples; excluded from per-class accuracy", c)
            continue
        accs.append(Fraction(int((predictions[hit] == c).sum()), total))
    if not accs:
        raise DataError("no class in the class set has test samples")
    return sum(accs, Fraction(0)) / len(accs)


def harmonic_mean(sa, ua):
    """2·sa·ua/(sa+ua), with 0/0 taken as 0. Exact when given Fractions."""
    if sa + ua == 0:
        return 0 * sa
    return 2 * sa * ua / (sa + ua)


@dataclass
class CzslReport:
    protocol: str  # "task_free" or "task_agnostic"
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    @property
    def columns(self) -> tuple:
        if self.protocol == "task_free":
            return ("point", "SA", "UA", "H")
        return ("task", "mSA", "mUA", "mH")

    def summary_line(self) -> str:
        """Percentages in table order: SA/mSA, UA/mUA, H/mH."""
        keys = self.columns[1:]
        src = self.aggregates if self.protocol == "task_agnostic" else self.rows[-1]
        return "  ".join(f"{k}={100 * src[k]:.2f}" for k in keys)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r[self.columns[0]]] + [repr(r[k]) for k in self.columns[1:]])
            if self.protocol == "task_agnostic":
                w.writerow(["mean"] + [repr(self.aggregates[k]) for k in self.columns[1:]])

    @classmethod
    def from_csv(cls, path) -> "CzslReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = tuple(rows[0])
        protocol = "task_free" if header[0] == "point" else "task_agnostic"
        rep = cls(protocol)
        for r in rows[1:]:
            rec = {header[0]: r[0], **{k: float(v) for k, v in zip(header[1:], r[1:]) if v != ""}}
            if r[0] == "mean":
                rep.aggregates = {k: rec[k] for k in header[1:]}
            else:
                rep.rows.append(rec)
        return rep


def eval_task_free(predictor: Predictor, ds: ZslDataset, point: str = "final") -> CzslReport:
    """SA / UA / H on the standard test split with predictions over all classes."""
    idx = ds.test_idx
    if not len(idx):
        raise DataError("empty test split")
    truth = ds.labels[idx]
    preds = np.asarray(predictor(ds.features[idx], None))
    sa = _per_class_exact(preds, truth, [c for c in ds.seen_classes if (truth == c).any()])
    ua = _per_class_exact(preds, truth, [c for c in ds.unseen_classes if (truth == c).any()])
    row = {"point": point, "SA": float(sa), "UA": float(ua), "H": float(harmonic_mean(sa, ua))}
    return CzslReport("task_free", [row])


def task_metrics(predictor: Predictor, ds: ZslDataset, split: TaskSplit, t: int) -> dict:
    """Seen / unseen / harmonic accuracies after task ``t`` (1-based), as Fractions."""
    seen, unseen = split.seen_upto(t), split.unseen_after(t)
    seen_idx, unseen_idx = split.test_upto(t), split.test_after(t)
    out = {"task": t}
    preds = np.asarray(predictor(ds.features[seen_idx], seen))
    out["SA"] = _per_class_exact(preds, ds.labels[seen_idx], seen)
    if t < split.num_tasks:
        preds = np.asarray(predictor(ds.features[unseen_idx], unseen))
        out["UA"] = _per_class_exact(preds, ds.labels[unseen_idx], unseen)
        full_seen = _per_class_exact(np.asarray(predictor(ds.features[seen_idx], None)),
                                     ds.labels[seen_idx], seen)
        full_unseen = _per_class_exact(np.asarray(predictor(ds.features[unseen_idx], None)),
                                       ds.labels[unseen_idx], unseen)
        out["H"] = harmonic_mean(full_seen, full_unseen)
    return out


def eval_task_agnostic(predictors: Sequence[Predictor], ds: ZslDataset, split: TaskSplit) -> CzslReport:
    """mSA / mUA / mH from one predictor per task checkpoint."""
    T = split.num_tasks
    if T < 2:
        raise DataError("task-agnostic metrics need T >= 2")
    if len(predictors) != T:
        raise DataError(f"{len(predictors)} checkpoints for {T} tasks")
    per_task = [task_metrics(p, ds, split, t + 1) for t, p in enumerate(predictors)]
    rows = []
    nan = float("nan")
    for m in per_task:
        rows.append({"task": m["task"], "mSA": float(m["SA"]), "mUA": float(m.get("UA", nan)),
                     "mH": float(m.get("H", nan))})
    agg = {
        "mSA": float(sum(m["SA"] for m in per_task) / T),
        "mUA": float(sum(m["UA"] for m in per_task[:-1]) / (T - 1)),
        "mH": float(sum(m["H"] for m in per_task[:-1]) / (T - 1)),
    }
    return CzslReport("task_agnostic", rows, agg)
