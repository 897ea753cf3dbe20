"""Classification and segmentation metrics.

Scores are never tie-broken: samples sharing a score always enter a ranking
together.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .imaging import MaskImage


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first entry is +inf
    tpr: np.ndarray
    fpr: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RocCurve:
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            np.array([float(r["threshold"]) for r in rows]),
            np.array([float(r["tpr"]) for r in rows]),
            np.array([float(r["fpr"]) for r in rows]),
        )


@dataclass
class MetricsReport:
    ap: float | None = None
    auc: float | None = None
    acc: float = 0.0
    sens: float = 0.0
    spec: float = 0.0
    sp95: float | None = None
    threshold: float = 0.5
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(bool)


def _grouped_counts(s, y):
    """Cumulative TP/FP at each distinct score, highest score first."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = np.cumsum(~y_sorted)[last_of_group]
    return s_sorted[last_of_group], tp, fp


def average_precision(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive")
    _, tp, fp = _grouped_counts(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


def _both_classes(y):
    if y.all() or not y.any():
        raise ContractError("both classes must be present")


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic with ties counted as one half."""
    s, y = _prepare(scores, labels)
    _both_classes(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    # midranks
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.shape[0])
    s_sorted = s[order]
    starts = np.r_[0, np.flatnonzero(s_sorted[1:] != s_sorted[:-1]) + 1]
    ends = np.r_[starts[1:], s.shape[0]]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    s, y = _prepare(scores, labels)
    _both_classes(y)
    thr, tp, fp = _grouped_counts(s, y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return RocCurve(
        np.r_[np.inf, thr],
        np.r_[0.0, tp / n_pos],
        np.r_[0.0, fp / n_neg],
    )


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(f"{name}_undefined")
        return 1.0
    return num / den


def confusion_at_threshold(scores, labels, t: float = 0.5) -> MetricsReport:
    s, y = _prepare(scores, labels)
    pred = s >= t
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    flags: list[str] = []
    total = tp + fp + tn + fn
    return MetricsReport(
        acc=_ratio(tp + tn, total, "acc", flags),
        sens=_ratio(tp, tp + fn, "sens", flags),
        spec=_ratio(tn, tn + fp, "spec", flags),
        threshold=t, tp=tp, fp=fp, tn=tn, fn=fn, flags=flags,
    )


def spec_at_sens(scores, labels, target: float = 0.95) -> float:
    """Best specificity among empirical operating points with sensitivity >= target."""
    curve = roc_curve(scores, labels)
    ok = curve.tpr >= target - 1e-12
    return float(1.0 - curve.fpr[ok].min())


def evaluate(scores, labels, threshold: float = 0.5) -> MetricsReport:
    report = confusion_at_threshold(scores, labels, threshold)
    y = np.asarray(labels).ravel()
    if y.any():
        report.ap = average_precision(scores, labels)
    if y.any() and not y.all():
        report.auc = roc_auc(scores, labels)
        report.sp95 = spec_at_sens(scores, labels, 0.95)
    else:
        report.flags.append("single_class")
    return report


@dataclass
class SegMetrics:
    jaccard: float
    acc: float
    sens: float
    spec: float
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def seg_metrics(pred: MaskImage, gt: MaskImage) -> SegMetrics:
    if pred.values.shape != gt.values.shape:
        raise ContractError(f"mask shapes differ: {pred.values.shape} vs {gt.values.shape}")
    if not pred.is_binary() or not gt.is_binary():
        raise ContractError("seg_metrics needs binary {0, 255} masks")
    p = pred.values == 255
    g = gt.values == 255
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    flags: list[str] = []
    return SegMetrics(
        jaccard=_ratio(tp, tp + fp + fn, "jaccard", flags),
        acc=_ratio(tp + tn, p.size, "acc", flags),
        sens=_ratio(tp, tp + fn, "sens", flags),
        spec=_ratio(tn, tn + fp, "spec", flags),
        flags=flags,
    )
