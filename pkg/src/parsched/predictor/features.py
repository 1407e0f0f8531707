"""Prompt feature extraction: signed feature hashing or precomputed embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..workload import PromptRecord


class FeatureError(ValueError):
    pass


@lru_cache(maxsize=1 << 18)
def _hash(feature: str) -> int:
    # stable across processes, unlike the builtin hash()
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")


def _char_ngrams(token: str, n: int) -> list[str]:
    wrapped = f"<{token}>"
    if len(wrapped) < n:
        return [wrapped]
    return [wrapped[i:i + n] for i in range(len(wrapped) - n + 1)]


@dataclass(frozen=True)
class FeatureExtractor:
    """Maps a prompt to a fixed-length real vector.

    ``kind="hashed_text"``: lower-cased whitespace tokens as word n-grams
    plus boundary-padded character n-grams, hashed into ``dim`` buckets with
    a hash-derived sign.  ``kind="precomputed_embedding"``: the record's own
    ``embedding`` vector, which must have length ``dim``.
    """

    kind: str = "hashed_text"
    dim: int = 4096
    word_ngrams: tuple[int, ...] = (1,)
    char_ngrams: tuple[int, ...] = (3,)
    normalization: str = "l2"

    def __post_init__(self):
        if self.kind not in ("hashed_text", "precomputed_embedding"):
            raise FeatureError(f"unknown extractor kind {self.kind!r}")
        if self.dim < 1:
            raise FeatureError(f"dim must be >= 1, got {self.dim}")
        if self.normalization not in ("none", "l2"):
            raise FeatureError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "word_ngrams", tuple(self.word_ngrams))
        object.__setattr__(self, "char_ngrams", tuple(self.char_ngrams))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["word_ngrams"] = list(self.word_ngrams)
        d["char_ngrams"] = list(self.char_ngrams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractor":
        return cls(
            kind=d["kind"],
            dim=int(d["dim"]),
            word_ngrams=tuple(d.get("word_ngrams", (1,))),
            char_ngrams=tuple(d.get("char_ngrams", (3,))),
            normalization=d.get("normalization", "l2"),
        )

    def _hashed_terms(self, text: str) -> dict[int, float]:
        tokens = text.lower().split()
        names: list[str] = []
        for n in self.word_ngrams:
            names += ["w%d:" % n + " ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
        for n in self.char_ngrams:
            for tok in tokens:
                names += ["c%d:" % n + g for g in _char_ngrams(tok, n)]
        acc: dict[int, float] = {}
        for name in names:
            h = _hash(name)
            col = h % self.dim
            acc[col] = acc.get(col, 0.0) + (1.0 if h >> 63 else -1.0)
        return acc

    def transform_one(self, record: PromptRecord) -> np.ndarray:
        return self.transform([record]).toarray()[0]

    def transform(self, records: Sequence[PromptRecord]) -> sp.csr_matrix:
        """Feature matrix with one row per record (CSR, float64)."""
        if self.kind == "precomputed_embedding":
            rows = np.zeros((len(records), self.dim))
            for i, rec in enumerate(records):
                if rec.embedding is None:
                    raise FeatureError(f"{rec.id}: no embedding for a precomputed_embedding extractor")
                if len(rec.embedding) != self.dim:
                    raise FeatureError(f"{rec.id}: embedding length {len(rec.embedding)} != {self.dim}")
                rows[i] = rec.embedding
            if self.normalization == "l2":
                norms = np.linalg.norm(rows, axis=1, keepdims=True)
                rows = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)
            return sp.csr_matrix(rows)

        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for rec in records:
            acc = self._hashed_terms(rec.prompt_text)
            cols = sorted(c for c, v in acc.items() if v != 0.0)
            vals = np.array([acc[c] for c in cols])
            if self.normalization == "l2" and len(vals):
                vals = vals / np.sqrt(np.dot(vals, vals))
            indices.extend(cols)
            data.extend(vals.tolist())
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.array(data, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
            shape=(len(records), self.dim),
        )
