"""Teacher-side masked hard instance mining.

Pipeline per bag: score every instance (attention, or class-aware instance
probability), sort descending, mask a random half of the top-2x candidates
(randomly-high-score masking), then split the survivors into a kept
sequence and a large masked-out sequence handed to the recycle network.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregators import BagOutput, MILModel

SOURCES = ("attention", "instance_probability")
STRATEGIES = ("rsm", "lsm")

# guards ceil/floor of products like 0.07 * 100 = 7.000000000000001
_EPS = 1e-9


def ceil_count(ratio: float, n: int) -> int:
    return min(n, max(0, math.ceil(ratio * n - _EPS)))


def floor_count(ratio: float, n: int) -> int:
    return min(n, max(0, math.floor(ratio * n + _EPS)))


@dataclass
class InstanceScores:
    scores: np.ndarray
    source: str


@dataclass
class DecaySchedule:
    initial_ratio: float
    total_steps: int

    def __post_init__(self):
        if not 0.0 <= self.initial_ratio < 0.5:
            raise ValueError(f"high-score mask ratio must be in [0, 0.5), got {self.initial_ratio}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


@dataclass
class MaskPlan:
    sorted_idx: np.ndarray  # descending score order
    high_mask: np.ndarray  # bool, length N
    low_mask: np.ndarray  # bool, one flag per survivor (ascending original index)
    kept_idx: np.ndarray
    recycle_idx: np.ndarray
    beta_h_eff: float = 0.0
    scores: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.high_mask.size

    @property
    def masked_high_idx(self) -> np.ndarray:
        return np.flatnonzero(self.high_mask)

    @property
    def survivors(self) -> np.ndarray:
        return np.flatnonzero(~self.high_mask)

    def roles(self) -> np.ndarray:
        r = np.empty(self.n, dtype=object)
        r[self.high_mask] = "masked_high"
        r[self.kept_idx] = "kept"
        r[self.recycle_idx] = "recycled"
        return r


def assess(output: BagOutput, teacher: MILModel, h: np.ndarray, source: str) -> InstanceScores:
    """Easiness score per instance; higher means easier to classify.

    ``h`` is the teacher's projected N x D features.  For
    ``instance_probability`` each attention-weighted row ``a_i * h_i`` is
    pushed through the teacher's bag classifier.
    """
    a = np.asarray(output.attention, dtype=np.float64)
    if a.shape[0] != h.shape[0]:
        raise ValueError(f"attention has {a.shape[0]} entries for {h.shape[0]} instances")
    if source == "attention":
        return InstanceScores(a.copy(), source)
    if source != "instance_probability":
        raise ValueError(f"unknown score source {source!r}")
    w = teacher.params["classifier.weight"]
    b = teacher.params["classifier.bias"]
    logits = (h * a[:, None]) @ w + b
    if logits.shape[1] == 1:
        s = 1.0 / (1.0 + np.exp(-logits[:, 0]))
    else:
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        s = (p / p.sum(axis=1, keepdims=True)).max(axis=1)
    return InstanceScores(s, source)


def sort_desc(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep the lower original index first."""
    return np.argsort(-np.asarray(scores), kind="stable")


def decayed_ratio(sched: DecaySchedule, step: int) -> float:
    """Cosine decay from the initial ratio to 0; steps past the end give 0."""
    if sched.total_steps == 0:
        return sched.initial_ratio if step == 0 else 0.0
    if step >= sched.total_steps:
        return 0.0
    return sched.initial_ratio * 0.5 * (1.0 + math.cos(math.pi * step / sched.total_steps))


def rhsm(scores, beta_h: float, rng: np.random.Generator) -> np.ndarray:
    """Randomly-high-score masking flags.

    Candidates are the top ``ceil(2*beta_h*N)`` scores; ``ceil(beta_h*N)`` of
    them are masked, drawn without replacement.
    """
    s = scores.scores if isinstance(scores, InstanceScores) else np.asarray(scores)
    n = s.size
    flags = np.zeros(n, dtype=bool)
    n_mask = ceil_count(beta_h, n)
    if n_mask == 0:
        return flags
    n_cand = max(n_mask, ceil_count(2.0 * beta_h, n))
    cand = sort_desc(s)[:n_cand]
    flags[rng.choice(cand, size=n_mask, replace=False)] = True
    return flags


def large_scale_mask(survivors, scores, beta_l: float, strategy: str,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split survivors into (kept, recycled), both in ascending original order."""
    if not 0.0 <= beta_l < 1.0:
        raise ValueError(f"large-scale mask ratio must be in [0, 1), got {beta_l}")
    surv = np.sort(np.asarray(survivors, dtype=np.int64))
    n_rec = ceil_count(beta_l, surv.size)
    if n_rec == 0:
        return surv, np.empty(0, dtype=np.int64)
    if strategy == "rsm":
        rec = rng.choice(surv, size=n_rec, replace=False)
    elif strategy == "lsm":
        s = scores.scores if isinstance(scores, InstanceScores) else np.asarray(scores)
        order = np.lexsort((surv, s[surv]))
        rec = surv[order[:n_rec]]
    else:
        raise ValueError(f"unknown masking strategy {strategy!r}")
    rec = np.sort(rec)
    kept = np.setdiff1d(surv, rec, assume_unique=True)
    return kept, rec


def plan_masks(scores: InstanceScores, beta_h: float, beta_l: float, strategy: str,
               rng: np.random.Generator) -> MaskPlan:
    s = scores.scores
    high = rhsm(s, beta_h, rng)
    surv = np.flatnonzero(~high)
    kept, rec = large_scale_mask(surv, s, beta_l, strategy, rng)
    low = np.isin(surv, rec)
    return MaskPlan(sort_desc(s), high, low, kept, rec, beta_h, s)


def full_plan(n: int) -> MaskPlan:
    """The no-masking plan: every instance kept."""
    idx = np.arange(n)
    return MaskPlan(idx, np.zeros(n, dtype=bool), np.zeros(n, dtype=bool), idx,
                    np.empty(0, dtype=np.int64), 0.0, None)


def apply_mask(z: np.ndarray, kept_idx, recycle_idx) -> tuple[np.ndarray, np.ndarray]:
    n = z.shape[0]
    kept = np.asarray(kept_idx, dtype=np.int64)
    rec = np.asarray(recycle_idx, dtype=np.int64)
    for idx in (kept, rec):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"mask index out of range for a bag of {n} instances")
    if np.intersect1d(kept, rec).size:
        raise ValueError("kept and recycled index sets overlap")
    return z[np.sort(kept)], z[np.sort(rec)]


def write_plans_csv(path_or_file, plans: dict[str, MaskPlan]) -> None:
    """Rows of ``bag_id, instance_idx, score, role``."""
    own = isinstance(path_or_file, str) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(["bag_id", "instance_idx", "score", "role"])
        for bag_id, plan in plans.items():
            roles = plan.roles()
            scores = plan.scores if plan.scores is not None else np.full(plan.n, np.nan)
            for i in range(plan.n):
                w.writerow([bag_id, i, repr(float(scores[i])), roles[i]])
    finally:
        if own:
            fh.close()
