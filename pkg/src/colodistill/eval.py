"""Metrics: ROC AUC, confusion metrics, Youden operating point, Dice, bootstrap CIs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __init__(self, scores: Sequence[float], labels: Sequence[int]):
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels).ravel()
        if s.shape != y.shape:
            raise MetricError(f"scores and labels differ in length: {s.size} vs {y.size}")
        if y.size and not np.isin(y, (0, 1)).all():
            raise MetricError("labels must be 0/1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.scores.size

    @property
    def has_both_classes(self) -> bool:
        return bool(self.labels.any() and not self.labels.all())

    def take(self, idx: np.ndarray) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx])


def _require_both(s: ScoredSet) -> None:
    if not s.has_both_classes:
        raise MetricError("both classes must be present")


def roc_auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC from midranks; ties count one half."""
    _require_both(s)
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(s), dtype=np.float64)
    # midranks over tie groups
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(s: ScoredSet, threshold: float) -> tuple[float, float, float]:
    """(acc, sen, spe) with predicted positive iff score >= threshold."""
    _require_both(s)
    pred = s.scores >= threshold
    pos = s.labels == 1
    tp = int((pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    sen = tp / int(pos.sum())
    spe = tn / int((~pos).sum())
    return (tp + tn) / len(s), sen, spe


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def youden_point(s: ScoredSet) -> float:
    """Threshold maximising sen + spe - 1; ties go to the higher specificity.

    Candidates are midpoints between adjacent distinct scores plus the two
    infinite sentinels.  Among thresholds with equal J and equal specificity
    the larger threshold wins.
    """
    _require_both(s)
    thr = candidate_thresholds(s.scores)
    # vectorised counts: for sorted positives/negatives count how many are >= t
    pos = np.sort(s.scores[s.labels == 1])
    neg = np.sort(s.scores[s.labels == 0])
    tp = pos.size - np.searchsorted(pos, thr, side="left")
    fp = neg.size - np.searchsorted(neg, thr, side="left")
    # J scaled by n_pos * n_neg stays integral, so ties compare exactly
    j_int = tp * neg.size + (neg.size - fp) * pos.size
    spe_int = neg.size - fp
    best = np.lexsort((thr, spe_int, j_int))[-1]
    return float(thr[best])


def youden_index(s: ScoredSet, threshold: float) -> float:
    _, sen, spe = confusion_metrics(s, threshold)
    return sen + spe - 1.0


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def bootstrap_ci(
    metric: Callable[[ScoredSet], float],
    s: ScoredSet,
    n_resamples: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
    max_redraws: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap interval.

    A resample on which ``metric`` raises :class:`MetricError` (e.g. a single
    class for AUC) is redrawn, at most ``max_redraws`` times per resample.
    """
    if n_resamples < 1:
        raise MetricError("n_resamples must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(s)
    values = np.empty(n_resamples)
    for r in range(n_resamples):
        for _ in range(max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            try:
                values[r] = metric(s.take(idx))
                break
            except MetricError:
                continue
        else:
            raise MetricError(f"metric undefined after {max_redraws} redraws")
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


@dataclass
class MetricReport:
    auc: float
    acc: float
    sen: float
    spe: float
    threshold: float
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Plain dict; a non-finite threshold becomes None so the result is strict JSON."""
        d = asdict(self)
        d["ci"] = {k: list(v) for k, v in self.ci.items()}
        if not np.isfinite(self.threshold):
            d["threshold"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metric_report(s: ScoredSet, n_resamples: int = 1000, seed: int = 0) -> MetricReport:
    """Point estimates at the Youden threshold plus bootstrap CIs.

    The threshold is held fixed across resamples.  The interval is widened to
    cover the point estimate when the bootstrap distribution is skewed past it.
    """
    thr = youden_point(s)
    auc = roc_auc(s)
    acc, sen, spe = confusion_metrics(s, thr)
    fns = {
        "auc": roc_auc,
        "acc": lambda t: confusion_metrics(t, thr)[0],
        "sen": lambda t: confusion_metrics(t, thr)[1],
        "spe": lambda t: confusion_metrics(t, thr)[2],
    }
    point = {"auc": auc, "acc": acc, "sen": sen, "spe": spe}
    ci = {}
    for name, fn in fns.items():
        lo, hi = bootstrap_ci(fn, s, n_resamples=n_resamples, seed=seed)
        ci[name] = (min(lo, point[name]), max(hi, point[name]))
    return MetricReport(auc=auc, acc=acc, sen=sen, spe=spe, threshold=thr, ci=ci)


def roc_curve_points(s: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) over all candidate thresholds, descending."""
    _require_both(s)
    thr = candidate_thresholds(s.scores)[::-1]
    pos = np.sort(s.scores[s.labels == 1])
    neg = np.sort(s.scores[s.labels == 0])
    tpr = (pos.size - np.searchsorted(pos, thr, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thr, side="left")) / neg.size
    return fpr, tpr, thr
