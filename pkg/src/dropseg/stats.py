"""Wilcoxon rank-sum (Mann-Whitney U) test, exact or normal-approximated."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySample, EnumerationTooLarge, NonFiniteInput

EXACT_MAX_N = 20
ALPHA = 0.05


@dataclass(frozen=True)
class RankSumResult:
    u_statistic: float
    p_two_sided: float
    mode: str
    n1: int
    n2: int
    z_score: Optional[float] = None
    tie_correction_applied: bool = False

    @property
    def significant(self) -> bool:
        return self.p_two_sided < ALPHA


def rank_with_ties(values: Sequence[float]) -> np.ndarray:
    """Ranks 1..n; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptySample("cannot rank an empty sample")
    if not np.isfinite(v).all():
        raise NonFiniteInput("ranks need finite values")
    order = np.argsort(v, kind="stable")
    sv = v[order]
    starts = np.r_[0, np.flatnonzero(sv[1:] != sv[:-1]) + 1]
    ends = np.r_[starts[1:], v.size]
    ranks = np.empty(v.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def _tie_sizes(ranks):
    _, counts = np.unique(ranks, return_counts=True)
    return counts[counts > 1]


def _exact_p(ranks2: np.ndarray, n1: int, observed_dev2: int) -> float:
    """P(|2U - n1*n2| >= observed) over all equally likely group-1 subsets.

    ``ranks2`` are doubled (integer) pooled ranks. Counts subsets of each size
    by doubled rank sum with a subset-sum table, which is the same tally as
    enumerating every assignment.
    """
    n = ranks2.size
    total = int(ranks2.sum())
    table = np.zeros((n1 + 1, total + 1), dtype=np.int64)
    table[0, 0] = 1
    for r in ranks2:
        r = int(r)
        table[1:, r:] = table[1:, r:] + table[:-1, : total + 1 - r]
    counts = table[n1]
    n2 = n - n1
    base = n1 * (n1 + 1)  # doubled n1(n1+1)/2
    hits = 0
    for s2 in np.flatnonzero(counts):
        u2 = int(s2) - base
        if abs(u2 - n1 * n2) >= observed_dev2:
            hits += int(counts[s2])
    return float(hits / math.comb(n, n1))


def wilcoxon_rank_sum(a: Sequence[float], b: Sequence[float], mode: str = "auto") -> RankSumResult:
    """Two-sided rank-sum test of ``a`` against ``b``.

    ``U`` counts pairs with ``a_i > b_j`` (ties count one half). ``mode="auto"``
    enumerates exactly when ``len(a) + len(b) <= 20`` and otherwise uses the
    tie-corrected normal approximation with a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise EmptySample("both samples need at least one value")
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    n = n1 + n2
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_N else "normal"
    if mode == "exact" and n > EXACT_MAX_N:
        raise EnumerationTooLarge(f"exact mode supports n1 + n2 <= {EXACT_MAX_N}, got {n}")

    ranks = rank_with_ties(np.concatenate([a, b]))
    r1 = ranks[:n1].sum()
    u = r1 - n1 * (n1 + 1) / 2.0
    ties = _tie_sizes(ranks)

    if mode == "exact":
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        u2 = int(ranks2[:n1].sum()) - n1 * (n1 + 1)
        p = _exact_p(ranks2, n1, abs(u2 - n1 * n2))
        return RankSumResult(float(u), min(p, 1.0), "exact", n1, n2,
                             tie_correction_applied=bool(ties.size))

    tie_term = float(np.sum(ties.astype(np.float64) ** 3 - ties)) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    dev = abs(u - n1 * n2 / 2.0)
    if var <= 0:
        z, p = 0.0, 1.0
    else:
        z = max(dev - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return RankSumResult(float(u), p, "normal", n1, n2, z_score=z,
                         tie_correction_applied=bool(ties.size))
