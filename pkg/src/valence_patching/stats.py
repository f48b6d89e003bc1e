"""One-sided Mann-Whitney U and Spearman rank correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata
from scipy.stats import t as t_dist

# both samples at or below this size use the exact permutation distribution
EXACT_MAX_N = 8


@dataclass(frozen=True)
class MannWhitneyResult:
    u_statistic: float
    p_value: float
    n1: int
    n2: int
    tie_corrected: bool
    method: str = "asymptotic"
    flagged: bool = False


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    n: int
    flagged: bool = False


def _exact_upper_tail(doubled_ranks: np.ndarray, n1: int, observed: int) -> float:
    """P(sum of n1 doubled ranks >= observed) over all equally likely label assignments.

    Tied values keep their midranks, so the result is the exact distribution
    conditional on the observed tie pattern.
    """
    ways: list[dict[int, int]] = [dict() for _ in range(n1 + 1)]
    ways[0][0] = 1
    for r in doubled_ranks.tolist():
        for k in range(n1, 0, -1):
            prev = ways[k - 1]
            cur = ways[k]
            for s, c in prev.items():
                cur[s + r] = cur.get(s + r, 0) + c
    hits = sum(c for s, c in ways[n1].items() if s >= observed)
    return hits / math.comb(len(doubled_ranks), n1)


def mann_whitney_one_sided(
    sample_a: Sequence[float], sample_b: Sequence[float], method: str = "auto"
) -> MannWhitneyResult:
    """Test whether ``sample_a`` is stochastically greater than ``sample_b``.

    ``method="auto"`` enumerates exactly when both samples have at most
    ``EXACT_MAX_N`` values. Otherwise it uses the normal approximation with
    tie-corrected variance and a continuity correction.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    _, counts = np.unique(pooled, return_counts=True)
    ties = bool((counts > 1).any())
    if counts.size == 1:
        # every relabelling gives the same U, so P(U >= observed) is 1
        return MannWhitneyResult(u, 1.0, n1, n2, ties, "degenerate", flagged=True)

    if method == "exact" or (method == "auto" and n1 <= EXACT_MAX_N and n2 <= EXACT_MAX_N):
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_upper_tail(doubled, n1, int(doubled[:n1].sum()))
        return MannWhitneyResult(u, min(1.0, p), n1, n2, ties, "exact")

    n = n1 + n2
    tie_term = float((counts.astype(float) ** 3 - counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    z = (u - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
    p = float(norm.sf(z))
    return MannWhitneyResult(u, min(1.0, max(0.0, p)), n1, n2, ties, "asymptotic")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> SpearmanResult:
    """Average-rank Spearman rho with a two-sided t-approximation p-value."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ValueError("xs and ys must have equal length")
    n = x.size
    if n < 3:
        raise ValueError("spearman needs at least 3 points")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return SpearmanResult(float("nan"), float("nan"), n, flagged=True)
    rho = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(rho) == 1.0:
        return SpearmanResult(rho, 0.0, n)
    t = rho * math.sqrt((n - 2) / ((1.0 - rho) * (1.0 + rho)))
    p = float(2 * t_dist.sf(abs(t), n - 2))
    return SpearmanResult(rho, min(1.0, p), n)
