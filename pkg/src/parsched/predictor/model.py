"""Linear scorers, trained-model files and the ground-truth oracle scorer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..workload import PromptRecord
from .features import FeatureExtractor

MODEL_FORMAT = "parsched-model"
MODEL_VERSION = 1
OBJECTIVES = ("pairwise", "pointwise_l1", "listwise_listmle")


class ModelError(ValueError):
    pass


@dataclass
class LinearScorer:
    """``score(p) = weights . features(p) + bias``; higher means longer output."""

    weights: np.ndarray
    bias: float
    extractor: FeatureExtractor

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.extractor.dim,):
            raise ModelError(f"weights shape {self.weights.shape} != ({self.extractor.dim},)")

    @classmethod
    def zeros(cls, extractor: FeatureExtractor) -> "LinearScorer":
        return cls(np.zeros(extractor.dim), 0.0, extractor)

    def score_matrix(self, x: sp.spmatrix) -> np.ndarray:
        return np.asarray(x @ self.weights).ravel() + self.bias

    def score_batch(self, records: Sequence[PromptRecord]) -> np.ndarray:
        return self.score_matrix(self.extractor.transform(records))

    def __call__(self, record: PromptRecord) -> float:
        return float(self.score_batch([record])[0])


@dataclass
class TrainedModel:
    scorer: LinearScorer
    objective: str
    config: dict = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ModelError(f"unknown objective {self.objective!r}")

    def __call__(self, record: PromptRecord) -> float:
        return self.scorer(record)

    def score_batch(self, records: Sequence[PromptRecord]) -> np.ndarray:
        return self.scorer.score_batch(records)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "objective": self.objective,
            "extractor": self.scorer.extractor.to_dict(),
            "dim": self.scorer.extractor.dim,
            "bias": float(self.scorer.bias),
            "weights": self.scorer.weights.tolist(),
            "config": self.config,
            "loss_trace": [float(v) for v in self.loss_trace],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format") != MODEL_FORMAT:
            raise ModelError(f"not a {MODEL_FORMAT} file")
        if d.get("version") != MODEL_VERSION:
            raise ModelError(f"unsupported model version {d.get('version')!r}")
        extractor = FeatureExtractor.from_dict(d["extractor"])
        if int(d["dim"]) != extractor.dim or len(d["weights"]) != extractor.dim:
            raise ModelError("dimension mismatch between header, extractor and weights")
        scorer = LinearScorer(np.array(d["weights"], dtype=float), float(d["bias"]), extractor)
        return cls(scorer, d["objective"], d.get("config", {}), list(d.get("loss_trace", [])))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(data)


def score(model: TrainedModel | LinearScorer, prompt: PromptRecord) -> float:
    return model(prompt)


class OracleScorer:
    """Scores a prompt by its ground-truth output length."""

    def __init__(self, records: Sequence[PromptRecord]):
        self._lengths = {r.id: r.output_len for r in records}

    def __call__(self, record: PromptRecord | str) -> float:
        pid = record if isinstance(record, str) else record.id
        try:
            return float(self._lengths[pid])
        except KeyError:
            raise ModelError(f"oracle has no ground-truth length for prompt {pid!r}") from None

    def score_batch(self, records: Sequence[PromptRecord]) -> np.ndarray:
        return np.array([self(r) for r in records])


def oracle_scorer(records: Sequence[PromptRecord]) -> OracleScorer:
    return OracleScorer(records)
