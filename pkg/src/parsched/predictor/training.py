"""Minibatch gradient descent for pairwise, pointwise and listwise objectives."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..workload import PromptRecord
from .features import FeatureExtractor
from .losses import listmle_loss_grad, pairwise_loss_grad, pointwise_l1_loss_grad
from .model import OBJECTIVES, LinearScorer, TrainedModel
from .pairs import DEFAULT_DELTA, sample_pair_indices

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# chosen on a held-out validation grid for L2-normalised hashed features
DEFAULT_LEARNING_RATES = {"pairwise": 10.0, "pointwise_l1": 0.5, "listwise_listmle": 5.0}
ROWS_PER_RECORD = 10


def default_samples_per_epoch(objective: str, n_records: int, list_size: int) -> int:
    rows = ROWS_PER_RECORD * n_records
    if objective == "pairwise":
        return max(1, rows // 2)
    if objective == "listwise_listmle":
        return max(1, rows // list_size)
    return rows


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``samples_per_epoch`` counts pairs (pairwise), records (pointwise) or
    lists (listwise).  ``None`` gives every objective the same budget of
    ``ROWS_PER_RECORD`` feature rows per training record per epoch, i.e.
    5n pairs, 10n records or 10n/list_size lists.  ``learning_rate=None``
    picks the per-objective default from ``DEFAULT_LEARNING_RATES``.
    """

    objective: str = "pairwise"
    delta: float = DEFAULT_DELTA
    margin: float = 1.0
    epochs: int = 5
    batch_size: int = 128
    learning_rate: Optional[float] = None
    seed: int = 0
    samples_per_epoch: Optional[int] = None
    list_size: int = 10
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise TrainingError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if not 0.0 <= self.delta < 1.0:
            raise TrainingError(f"delta must be in [0, 1), got {self.delta}")
        if not self.margin > 0:
            raise TrainingError(f"margin must be > 0, got {self.margin}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LEARNING_RATES[self.objective])
        if not self.learning_rate > 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise TrainingError("samples_per_epoch must be >= 1")
        if self.list_size < 2:
            raise TrainingError("list_size must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"] = self.extractor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "extractor" in d:
            d["extractor"] = FeatureExtractor.from_dict(d["extractor"])
        return cls(**d)


def pointwise_target(output_len: np.ndarray | int) -> np.ndarray:
    return np.log1p(output_len)


def _sample_lists(lengths: np.ndarray, id_rank: np.ndarray, m: int, k: int, rng) -> np.ndarray:
    """``m`` lists of ``k`` distinct indices, each in true order (longest first, ties by id)."""
    n = len(lengths)
    lists = rng.integers(0, n, size=(m, k))
    while True:
        srt = np.sort(lists, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if not dup.any():
            break
        lists[dup] = rng.integers(0, n, size=(int(dup.sum()), k))
    key = -lengths[lists].astype(np.int64) * n + id_rank[lists]
    return np.take_along_axis(lists, np.argsort(key, axis=1, kind="stable"), axis=1)


def train(records: Sequence[PromptRecord], config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Fit a linear scorer from all-zero weights.  Deterministic under ``config.seed``."""
    if not records:
        raise TrainingError("no training records")
    n = len(records)
    x = config.extractor.transform(records)
    lengths = np.array([r.output_len for r in records], dtype=np.int64)
    per_epoch = config.samples_per_epoch or default_samples_per_epoch(config.objective, n, config.list_size)
    rng = np.random.default_rng(config.seed)
    w = np.zeros(config.extractor.dim)
    b = 0.0
    lr = config.learning_rate
    bs = config.batch_size

    id_rank = targets = None
    if config.objective == "listwise_listmle":
        if n < config.list_size:
            raise TrainingError(f"need at least list_size={config.list_size} records, got {n}")
        id_rank = np.empty(n, dtype=np.int64)
        id_rank[np.argsort(np.array([r.id for r in records]), kind="stable")] = np.arange(n)
    if config.objective == "pointwise_l1":
        targets = pointwise_target(lengths)

    trace: list[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        seen = 0
        # overflow shows up as a non-finite epoch loss and is reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            if config.objective == "pairwise":
                ia, ib, y, _ = sample_pair_indices(lengths, config.delta, per_epoch, rng)
                for s in range(0, len(y), bs):
                    sl = slice(s, s + bs)
                    loss, gw, gb = pairwise_loss_grad(w, b, x[ia[sl]], x[ib[sl]], y[sl], config.margin)
                    w -= lr * gw
                    b -= lr * gb
                    total += loss * len(y[sl])
                    seen += len(y[sl])
            elif config.objective == "pointwise_l1":
                reps = -(-per_epoch // n)
                order = np.concatenate([rng.permutation(n) for _ in range(reps)])[:per_epoch]
                for s in range(0, per_epoch, bs):
                    idx = order[s:s + bs]
                    loss, gw, gb = pointwise_l1_loss_grad(w, b, x[idx], targets[idx])
                    w -= lr * gw
                    b -= lr * gb
                    total += loss * len(idx)
                    seen += len(idx)
            else:
                k = config.list_size
                lists = _sample_lists(lengths, id_rank, per_epoch, k, rng)
                for s in range(0, per_epoch, bs):
                    chunk = lists[s:s + bs]
                    loss, gw, gb = listmle_loss_grad(w, b, x[chunk.ravel()], chunk.shape)
                    w -= lr * gw
                    b -= lr * gb
                    total += loss * len(chunk)
                    seen += len(chunk)
        epoch_loss = total / seen
        if not math.isfinite(epoch_loss) or not np.isfinite(w).all():
            raise TrainingError(f"diverged at epoch {epoch}")
        log.debug("epoch %d %s loss %.6f", epoch, config.objective, epoch_loss)
        trace.append(epoch_loss)

    scorer = LinearScorer(w, b, config.extractor)
    return TrainedModel(scorer, config.objective, config.to_dict(), trace)
