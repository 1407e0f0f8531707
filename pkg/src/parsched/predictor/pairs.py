"""Labelled training pairs with relative-length-difference filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..workload import PromptRecord

DEFAULT_DELTA = 0.2
REASONING_DELTA = 0.25
# candidate draws allowed per requested pair before giving up
SAMPLING_BUDGET_FACTOR = 50


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class RankedPair:
    a: str
    b: str
    y: int
    rel_diff: float


def min_length_difference(len_a: float, len_b: float) -> float:
    """``|L_A - L_B| / max(L_A, L_B)``."""
    return abs(len_a - len_b) / max(len_a, len_b)


def pair_label(len_a: float, len_b: float) -> int:
    """+1 if A is longer, -1 if shorter.  Ties have no label."""
    if len_a == len_b:
        raise PairError("equal lengths have no pairwise label")
    return 1 if len_a > len_b else -1


def is_informative(len_a: float, len_b: float, delta: float) -> bool:
    return len_a != len_b and min_length_difference(len_a, len_b) >= delta


def sample_pair_indices(
    lengths: Sequence[int] | np.ndarray,
    delta: float,
    max_pairs: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Draw uniform ordered pairs of distinct indices and keep informative ones.

    Returns ``(idx_a, idx_b, y, n_drawn)``.  Sampling is with replacement and
    stops once ``max_pairs`` pairs are kept or ``SAMPLING_BUDGET_FACTOR *
    max_pairs`` candidates have been drawn.
    """
    if not 0.0 <= delta < 1.0:
        raise PairError(f"delta must be in [0, 1), got {delta}")
    if max_pairs < 1:
        raise PairError(f"max_pairs must be >= 1, got {max_pairs}")
    L = np.asarray(lengths, dtype=float)
    n = len(L)
    if n < 2:
        raise PairError("no informative pairs: need at least two records")

    budget = SAMPLING_BUDGET_FACTOR * max_pairs
    kept_a: list[np.ndarray] = []
    kept_b: list[np.ndarray] = []
    n_kept = 0
    n_drawn = 0
    while n_kept < max_pairs and n_drawn < budget:
        chunk = min(budget - n_drawn, max(4096, 2 * (max_pairs - n_kept)))
        a = rng.integers(0, n, size=chunk)
        b = rng.integers(0, n - 1, size=chunk)
        b = b + (b >= a)
        la, lb = L[a], L[b]
        diff = np.abs(la - lb)
        keep = (diff > 0) & (diff / np.maximum(la, lb) >= delta)
        ka, kb = a[keep], b[keep]
        take = min(len(ka), max_pairs - n_kept)
        if take < len(ka):
            # stop exactly at the candidate that filled the quota
            last = np.flatnonzero(keep)[take - 1]
            n_drawn += int(last) + 1
        else:
            n_drawn += chunk
        kept_a.append(ka[:take])
        kept_b.append(kb[:take])
        n_kept += take

    if n_kept == 0:
        raise PairError("no informative pairs: no candidate pair satisfies the length-difference filter")
    idx_a = np.concatenate(kept_a)
    idx_b = np.concatenate(kept_b)
    y = np.where(L[idx_a] > L[idx_b], 1, -1).astype(np.int64)
    return idx_a, idx_b, y, n_drawn


def build_pairs(
    records: Sequence[PromptRecord],
    delta: float = DEFAULT_DELTA,
    max_pairs: int = 10_000,
    seed: int = 0,
) -> list[RankedPair]:
    if not records:
        raise PairError("records must be non-empty")
    lengths = np.array([r.output_len for r in records])
    ia, ib, y, _ = sample_pair_indices(lengths, delta, max_pairs, np.random.default_rng(seed))
    return [
        RankedPair(
            records[i].id,
            records[j].id,
            int(lab),
            min_length_difference(records[i].output_len, records[j].output_len),
        )
        for i, j, lab in zip(ia.tolist(), ib.tolist(), y.tolist())
    ]
