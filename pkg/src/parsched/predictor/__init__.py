"""Prompt-length ranking predictors."""

from __future__ import annotations

from typing import Callable, Sequence

from ..metrics import TauResult, kendall_tau_b
from ..workload import PromptRecord
from .features import FeatureError, FeatureExtractor
from .losses import margin_ranking_loss
from .model import LinearScorer, ModelError, OracleScorer, TrainedModel, oracle_scorer, score
from .pairs import (
    DEFAULT_DELTA,
    REASONING_DELTA,
    PairError,
    RankedPair,
    build_pairs,
    min_length_difference,
)
from .training import TrainConfig, TrainingError, train


def evaluate_tau(scorer: Callable[[PromptRecord], float], records: Sequence[PromptRecord]) -> TauResult:
    """Kendall tau-b between predicted scores and ground-truth output lengths."""
    if hasattr(scorer, "score_batch"):
        scores = scorer.score_batch(records)
    else:
        scores = [scorer(r) for r in records]
    return kendall_tau_b(scores, [r.output_len for r in records])


__all__ = [
    "DEFAULT_DELTA",
    "REASONING_DELTA",
    "FeatureError",
    "FeatureExtractor",
    "LinearScorer",
    "ModelError",
    "OracleScorer",
    "PairError",
    "RankedPair",
    "TrainConfig",
    "TrainedModel",
    "TrainingError",
    "build_pairs",
    "evaluate_tau",
    "margin_ranking_loss",
    "min_length_difference",
    "oracle_scorer",
    "score",
    "train",
]
