"""Fixation-based evaluation metrics: AUC, shuffled AUC, NSS, SIM, CC.

All functions are pure. Degenerate inputs (constant or zero-variance maps)
fall back to documented conventions -- AUC 0.5, NSS 0, CC 0 -- and emit a
``DegenerateMapWarning`` instead of failing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateMapWarning(UserWarning):
    """A zero-variance or constant map forced a convention value."""


@dataclass
class MetricReport:
    auc: float
    sauc: float
    nss: float
    sim: float
    cc: float

    def as_row(self):
        return [self.auc, self.sauc, self.nss, self.sim, self.cc]


def _check_fixations(salmap, fixations):
    if len(fixations) == 0:
        raise ValueError("fixation set must be nonempty")
    h, w = salmap.shape
    for x, y in fixations:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"fixation ({x},{y}) outside {h}x{w} map bounds")


def _roc_points(pos, neg):
    """ROC curve from positive/negative score sets: all distinct values as
    thresholds (>= comparison), endpoints (0,0) and (1,1) included."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append(float(np.mean(pos >= t)))
        fpr.append(float(np.mean(neg >= t)))
    if tpr[-1] != 1.0 or fpr[-1] != 1.0:
        tpr.append(1.0)
        fpr.append(1.0)
    return list(zip(fpr, tpr))


def _area(points):
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def roc_export(salmap, fixations):
    """Ordered (FPR, TPR) list whose trapezoidal area equals ``auc`` exactly."""
    salmap = np.asarray(salmap, dtype=np.float64)
    _check_fixations(salmap, fixations)
    pos, neg = _split_scores(salmap, fixations)
    if neg.size == 0:
        raise ValueError("map must have at least one non-fixated pixel")
    if np.ptp(salmap) == 0:
        warnings.warn("constant map: ROC degenerates to the diagonal", DegenerateMapWarning)
        return [(0.0, 0.0), (1.0, 1.0)]
    return _roc_points(pos, neg)


def _split_scores(salmap, fixations):
    h, w = salmap.shape
    fixed = np.zeros((h, w), dtype=bool)
    for x, y in fixations:
        fixed[y, x] = True
    pos = np.array([salmap[y, x] for x, y in fixations], dtype=np.float64)
    neg = salmap[~fixed].astype(np.float64)
    return pos, neg


def auc(salmap, fixations):
    """Judd-style AUC: fixated pixels vs. all non-fixated pixels, thresholds
    at every distinct map value, trapezoidal integration (ties count half)."""
    return _area(roc_export(salmap, fixations))


def _auc_scores(pos, neg):
    if np.ptp(np.concatenate([pos, neg])) == 0:
        return 0.5
    return _area(_roc_points(pos, neg))


def sauc(salmap, fixations, other_fixations, n_shuffles=10, seed=0):
    """Shuffled AUC: negatives are fixations drawn from other frames.

    Each of ``n_shuffles`` rounds samples ``len(fixations)`` points from the
    pool, without replacement when the pool is large enough; the result is
    the mean AUC over rounds, deterministic per seed.
    """
    salmap = np.asarray(salmap, dtype=np.float64)
    _check_fixations(salmap, fixations)
    pool = list(other_fixations)
    if not pool:
        raise ValueError("shuffled AUC needs a nonempty pool of other-frame fixations")
    h, w = salmap.shape
    for x, y in pool:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"pool fixation ({x},{y}) outside {h}x{w} map bounds")
    rng = np.random.default_rng(seed)
    pos = np.array([salmap[y, x] for x, y in fixations], dtype=np.float64)
    k = len(fixations)
    scores = []
    for _ in range(n_shuffles):
        replace = k > len(pool)
        idx = rng.choice(len(pool), size=k, replace=replace)
        neg = np.array([salmap[pool[i][1], pool[i][0]] for i in idx], dtype=np.float64)
        scores.append(_auc_scores(pos, neg))
    return float(np.mean(scores))


def nss(salmap, fixations):
    """Mean of the zero-mean unit-std (population) standardized map at the
    fixation pixels; 0 with a warning for zero-variance maps."""
    salmap = np.asarray(salmap, dtype=np.float64)
    _check_fixations(salmap, fixations)
    std = salmap.std()
    if std == 0:
        warnings.warn("zero-variance map: NSS defined as 0", DegenerateMapWarning)
        return 0.0
    z = (salmap - salmap.mean()) / std
    return float(np.mean([z[y, x] for x, y in fixations]))


def sim(pred, gt_density):
    """Histogram intersection of the two sum-normalized maps."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt_density, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"sim shape mismatch: {pred.shape} vs {gt.shape}")
    if (pred < 0).any() or (gt < 0).any():
        raise ValueError("sim requires non-negative maps")
    sp, sg = pred.sum(), gt.sum()
    if sp == 0 or sg == 0:
        raise ValueError("sim requires maps with positive sums")
    return float(np.minimum(pred / sp, gt / sg).sum())


def cc(pred, gt_density):
    """Pearson linear correlation over pixels; 0 with a warning on zero std."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt_density, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("cc shape mismatch")
    if pred.std() == 0 or gt.std() == 0:
        warnings.warn("zero-variance map: CC defined as 0", DegenerateMapWarning)
        return 0.0
    return float(np.corrcoef(pred, gt)[0, 1])


def shift_nonnegative(salmap):
    """Min-shift a map so SIM's non-negativity precondition holds."""
    salmap = np.asarray(salmap, dtype=np.float64)
    lo = salmap.min()
    return salmap - lo if lo < 0 else salmap


def report(pred, gt_density, fixations, other_fixations, n_shuffles=10, seed=0):
    """Full per-frame metric report for one predicted map."""
    shifted = shift_nonnegative(pred)
    if shifted.sum() == 0:
        shifted = shifted + 1.0  # constant map; SIM falls back to uniform overlap
    return MetricReport(
        auc=auc(pred, fixations),
        sauc=sauc(pred, fixations, other_fixations, n_shuffles=n_shuffles, seed=seed),
        nss=nss(pred, fixations),
        sim=sim(shifted, gt_density),
        cc=cc(pred, gt_density),
    )
