"""Bag-level metrics: ROC-AUC and accuracy / F1 at the F1-optimal threshold."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import kernels

THRESHOLD_CRITERION = "f1"


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricReport:
    auc: float
    accuracy: float
    f1: float
    optimal_threshold: float
    n_pos: int
    n_neg: int
    criterion: str = THRESHOLD_CRITERION

    def to_dict(self) -> dict:
        return asdict(self)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("metric needs at least one positive and one negative")
    return s, y, n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, ties counted one half."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    return kernels.mann_whitney_u(s, y) / (n_pos * n_neg)


def auc_ovr(probs, labels) -> float:
    """Mean one-vs-rest AUC over classes present in ``labels``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    vals = [auc(p[:, c], (y == c).astype(int)) for c in range(p.shape[1])
            if 0 < (y == c).sum() < y.size]
    if not vals:
        raise UndefinedMetricError("no class has both positive and negative bags")
    return float(np.mean(vals))


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.r_[-np.inf, mids, np.inf]


def confusion_at(scores, labels, threshold: float) -> tuple[float, float]:
    """(accuracy, F1) predicting positive when score > threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s > threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    acc = float(np.mean(pred == y))
    f1 = 2.0 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


def optimal_threshold_metrics(scores, labels) -> MetricReport:
    """Scan midpoints (and +-inf); maximise F1, then accuracy, then prefer the lower threshold."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    best = None
    for t in candidate_thresholds(s):
        acc, f1 = confusion_at(s, y, t)
        key = (f1, acc, -t)
        if best is None or key > best[0]:
            best = (key, t, acc, f1)
    _, t, acc, f1 = best
    return MetricReport(auc(s, y), acc, f1, float(t), n_pos, n_neg)


def aggregate(reports: list[MetricReport]) -> dict:
    """Mean and population standard deviation over folds."""
    out = {"n_folds": len(reports), "criterion": THRESHOLD_CRITERION}
    for key in ("auc", "accuracy", "f1"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    return out


def to_json(obj) -> str:
    def conv(o):
        if isinstance(o, MetricReport):
            return o.to_dict()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))

    def fix_inf(o):
        if isinstance(o, float) and not np.isfinite(o):
            return "inf" if o > 0 else "-inf"
        if isinstance(o, dict):
            return {k: fix_inf(v) for k, v in o.items()}
        if isinstance(o, list):
            return [fix_inf(v) for v in o]
        return o

    plain = json.loads(json.dumps(obj, default=conv))
    return json.dumps(fix_inf(plain), indent=2, sort_keys=True) + "\n"
