"""Voxel-level ROC/AUC, Youden thresholds, overlap scores and aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateCurve, DegenerateGroundTruth, EmptyInput, ShapeMismatch
from .volgrid import BinaryMask, ProbabilityVolume


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Points ordered by strictly decreasing threshold.

    The first point is the ``(0, 0)`` sentinel at threshold ``+inf``; the last
    point, at the smallest predicted value, is always ``(1, 1)`` for curves
    built by :func:`roc_curve`.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        f = np.asarray(self.fpr, dtype=np.float64)
        p = np.asarray(self.tpr, dtype=np.float64)
        if not (t.shape == f.shape == p.shape) or t.ndim != 1 or t.size == 0:
            raise ShapeMismatch("thresholds, fpr and tpr must be aligned 1-D arrays")
        if (np.diff(t) >= 0).any():
            raise ValueError("thresholds must be strictly decreasing")
        if (np.diff(f) < 0).any() or (np.diff(p) < 0).any():
            raise ValueError("fpr and tpr must be non-decreasing")
        if f.min() < 0 or f.max() > 1 or p.min() < 0 or p.max() > 1:
            raise ValueError("rates must lie in [0, 1]")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "fpr", f)
        object.__setattr__(self, "tpr", p)

    def __len__(self):
        return self.thresholds.size


def _pairs(probs, gts):
    if isinstance(probs, ProbabilityVolume) or isinstance(probs, np.ndarray):
        probs, gts = [probs], [gts]
    ps, gs = [], []
    for p, g in zip(probs, gts):
        pv = p.voxels if hasattr(p, "voxels") else np.asarray(p)
        gv = g.voxels if hasattr(g, "voxels") else np.asarray(g)
        if pv.shape != gv.shape:
            raise ShapeMismatch(f"probability {pv.shape} vs ground truth {gv.shape}")
        ps.append(pv.ravel())
        gs.append(gv.ravel())
    if not ps:
        raise EmptyInput("no volumes given")
    return np.concatenate(ps).astype(np.float64), np.concatenate(gs).astype(bool)


def confusion(prob, gt, t: float) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with a voxel predicted positive iff ``prob >= t``."""
    p, g = _pairs(prob, gt)
    pos = p >= t
    tp = int(np.count_nonzero(pos & g))
    fp = int(np.count_nonzero(pos & ~g))
    fn = int(np.count_nonzero(~pos & g))
    return tp, fp, fn, p.size - tp - fp - fn


def roc_curve(prob, gt) -> RocCurve:
    """Exact ROC over every distinct predicted value.

    ``prob``/``gt`` may also be sequences of volumes, which are pooled (this is
    how a single validation threshold is chosen across cases).
    """
    p, g = _pairs(prob, gt)
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateGroundTruth("ground truth needs both positive and negative voxels")
    order = np.argsort(-p, kind="stable")
    ps, gs = p[order], g[order]
    last_of_run = np.r_[ps[1:] != ps[:-1], True]
    tp = np.cumsum(gs)[last_of_run]
    fp = np.cumsum(~gs)[last_of_run]
    return RocCurve(
        np.r_[np.inf, ps[last_of_run]],
        np.r_[0.0, fp / n_neg],
        np.r_[0.0, tp / n_pos],
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    f, t = curve.fpr, curve.tpr
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def youden_threshold(curve: RocCurve) -> float:
    """Threshold maximising tpr - fpr; ties go to the larger threshold."""
    finite = np.isfinite(curve.thresholds)
    if not finite.any():
        raise DegenerateCurve("curve has no finite threshold")
    j = np.where(finite, curve.tpr - curve.fpr, -np.inf)
    # thresholds decrease along the curve, so the first maximum is the largest
    return float(curve.thresholds[int(np.argmax(j))])


def dice(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def precision(tp: int, fp: int) -> float:
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


def recall(tp: int, fn: int) -> float:
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def aggregate(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < 2:
        raise EmptyInput(f"need at least two values for a standard deviation, got {v.size}")
    return float(v.mean()), float(v.std(ddof=1))


def mean(values: Iterable[float]) -> float:
    v = list(values)
    if not v:
        raise EmptyInput("mean of no values")
    return math.fsum(v) / len(v)


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([f"{t:.9g}", f"{f:.9g}", f"{p:.9g}"])


def read_roc_csv(path) -> RocCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "fpr", "tpr"]:
        raise ValueError(f"{path}: expected header 'threshold,fpr,tpr'")
    if len(rows) < 2:
        raise ValueError(f"{path}: no ROC points")
    try:
        t, f, p = (np.array(col, dtype=np.float64) for col in zip(*rows[1:]))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed ROC row ({exc})") from None
    return RocCurve(t, f, p)
