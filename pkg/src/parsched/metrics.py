"""Ranking and latency metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


class DegenerateRankingError(MetricsError):
    """All values tied in one of the inputs; tau-b is undefined."""


@dataclass(frozen=True)
class TauResult:
    tau_b: float
    n_c: int
    n_d: int
    n_0: int
    n_1: int
    n_2: int


def _tied_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _joint_tied_pairs(x: np.ndarray, y: np.ndarray) -> int:
    _, counts = np.unique(np.stack([x, y], axis=1), axis=0, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(seq: np.ndarray) -> int:
    """Number of index pairs i < j with seq[i] > seq[j].

    Bottom-up merge sort with every merge level done as one vectorised step.
    The input is padded to a power of two with +inf at the end, which adds no
    strict inversions.
    """
    n = len(seq)
    size = 1 << max(0, (n - 1).bit_length())
    a = np.full(size, np.inf)
    a[:n] = seq
    inversions = 0
    width = 1
    while width < size:
        blocks = a.reshape(-1, 2 * width)
        # stable sort keeps left-half elements ahead of equal right-half ones
        order = np.argsort(blocks, axis=1, kind="stable")
        pos = np.argsort(order, axis=1, kind="stable")
        right_pos = pos[:, width:]
        # left elements <= right[j] equals its merged position minus j
        left_le = right_pos - np.arange(width)
        inversions += int((width - left_le).sum())
        a = np.take_along_axis(blocks, order, axis=1).reshape(-1)
        width *= 2
    return inversions


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> TauResult:
    """Kendall's tau-b with tie correction, in O(n log n).

    Pairs tied in both inputs count toward ``n_1`` and ``n_2`` and toward
    neither ``n_c`` nor ``n_d``.
    """
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.ndim != 1 or xa.shape != ya.shape:
        raise MetricsError(f"inputs must be equal-length 1-d sequences, got {xa.shape} and {ya.shape}")
    n = len(xa)
    if n < 2:
        raise MetricsError("need at least 2 items")
    if not (np.isfinite(xa).all() and np.isfinite(ya).all()):
        raise MetricsError("inputs must be finite")

    n_0 = n * (n - 1) // 2
    n_1 = _tied_pairs(xa)
    n_2 = _tied_pairs(ya)
    n_3 = _joint_tied_pairs(xa, ya)
    order = np.lexsort((ya, xa))
    n_d = _count_inversions(ya[order])
    n_c = n_0 - n_1 - n_2 + n_3 - n_d
    denom = (n_0 - n_1) * (n_0 - n_2)
    if denom == 0:
        raise DegenerateRankingError("degenerate ranking: all values tied in one input")
    tau = (n_c - n_d) / math.sqrt(denom)
    return TauResult(min(1.0, max(-1.0, tau)), n_c, n_d, n_0, n_1, n_2)


def kendall_tau_b_bruteforce(x: Sequence[float], y: Sequence[float]) -> TauResult:
    """Quadratic pair-counting reference for :func:`kendall_tau_b`."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    n = len(xa)
    iu = np.triu_indices(n, k=1)
    dx = np.sign(xa[:, None] - xa[None, :])[iu]
    dy = np.sign(ya[:, None] - ya[None, :])[iu]
    prod = dx * dy
    n_c = int((prod > 0).sum())
    n_d = int((prod < 0).sum())
    n_0 = n * (n - 1) // 2
    n_1 = int((dx == 0).sum())
    n_2 = int((dy == 0).sum())
    denom = (n_0 - n_1) * (n_0 - n_2)
    if denom == 0:
        raise DegenerateRankingError("degenerate ranking: all values tied in one input")
    return TauResult((n_c - n_d) / math.sqrt(denom), n_c, n_d, n_0, n_1, n_2)


@dataclass(frozen=True)
class LatencySummary:
    mean_per_token_ms: float
    p90_per_token_ms: float
    count: int
    speedup_vs_fcfs: Optional[float] = None


def nearest_rank(values: Sequence[float], pct: int) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not values:
        raise MetricsError("percentile of an empty sequence")
    if not 0 < pct <= 100:
        raise MetricsError(f"percentile must be in (0, 100], got {pct}")
    ordered = sorted(values)
    rank = -(-pct * len(ordered) // 100)
    return ordered[rank - 1]


def summarize_per_token(per_token_s: Sequence[float]) -> LatencySummary:
    if len(per_token_s) == 0:
        raise MetricsError("no completed requests to summarize")
    ms = [v * 1000.0 for v in per_token_s]
    return LatencySummary(
        mean_per_token_ms=math.fsum(ms) / len(ms),
        p90_per_token_ms=nearest_rank(ms, 90),
        count=len(ms),
    )


def latency_summary(result) -> LatencySummary:
    """Average and p90 per-token latency (ms/token) of a simulation result."""
    return summarize_per_token([r.per_token_latency for r in result.records])


def relative_variance(samples: Sequence[int]) -> float:
    """``(max / min - 1) * 100`` over repeated-run output lengths."""
    if len(samples) < 2:
        raise MetricsError("need at least 2 samples")
    if any(s < 1 for s in samples):
        raise MetricsError("samples must all be >= 1")
    return (max(samples) / min(samples) - 1.0) * 100.0


def speedup(baseline_mean: float, policy_mean: float) -> float:
    if not policy_mean > 0:
        raise MetricsError(f"policy mean latency must be > 0, got {policy_mean}")
    return baseline_mean / policy_mean
