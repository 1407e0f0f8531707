"""Prompt datasets, synthetic length workloads and arrival traces.

Dataset files are JSON lines.  The first line is a header::

    {"format": "parsched-dataset", "version": 1, "embedding_dim": null}

and every following non-blank line is one record::

    {"id": "p000001", "prompt": "...", "output_len": 212,
     "output_len_samples": [205, 212, 230],   # optional
     "embedding": [0.1, -0.4, ...],            # optional, embedding_dim floats
     "prompt_len": 11}                          # optional, whitespace tokens

Arrival traces are CSV with a versioned comment header followed by
``prompt_id,arrival_time_s`` rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DATASET_FORMAT = "parsched-dataset"
DATASET_VERSION = 1
TRACE_FORMAT = "parsched-trace"
TRACE_VERSION = 1


class WorkloadError(ValueError):
    """Raised for malformed datasets, traces or generator parameters."""


@dataclass(frozen=True)
class PromptRecord:
    id: str
    prompt_text: str
    output_len: int
    output_len_samples: Optional[tuple[int, ...]] = None
    embedding: Optional[tuple[float, ...]] = None
    prompt_len: int = 0

    def __post_init__(self):
        if not self.id:
            raise WorkloadError("record id must be a non-empty string")
        if isinstance(self.output_len, bool) or not isinstance(self.output_len, int):
            raise WorkloadError(f"{self.id}: output_len must be an integer")
        if self.output_len < 1:
            raise WorkloadError(f"{self.id}: output_len must be >= 1, got {self.output_len}")
        if self.output_len_samples is not None:
            samples = tuple(self.output_len_samples)
            if not samples:
                raise WorkloadError(f"{self.id}: output_len_samples is empty")
            if any(isinstance(s, bool) or not isinstance(s, int) or s < 1 for s in samples):
                raise WorkloadError(f"{self.id}: output_len_samples must be integers >= 1")
            if median_floor(samples) != self.output_len:
                raise WorkloadError(
                    f"{self.id}: output_len {self.output_len} is not the median of its samples "
                    f"({median_floor(samples)})"
                )
            object.__setattr__(self, "output_len_samples", samples)
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        if not self.prompt_len:
            object.__setattr__(self, "prompt_len", max(1, len(self.prompt_text.split())))
        elif self.prompt_len < 1:
            raise WorkloadError(f"{self.id}: prompt_len must be >= 1")


def median_floor(values: Sequence[int]) -> int:
    """Median of integer samples, rounded down for even counts."""
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) // 2


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def _record_to_json(rec: PromptRecord) -> dict:
    out = {"id": rec.id, "prompt": rec.prompt_text, "output_len": rec.output_len}
    if rec.output_len_samples is not None:
        out["output_len_samples"] = list(rec.output_len_samples)
    if rec.embedding is not None:
        out["embedding"] = list(rec.embedding)
    out["prompt_len"] = rec.prompt_len
    return out


def write_dataset(records: Sequence[PromptRecord], path: str | Path) -> None:
    dims = {len(r.embedding) for r in records if r.embedding is not None}
    if len(dims) > 1:
        raise WorkloadError(f"records carry embeddings of differing lengths: {sorted(dims)}")
    if dims and any(r.embedding is None for r in records):
        raise WorkloadError("either all records or none must carry an embedding")
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "embedding_dim": dims.pop() if dims else None}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(_record_to_json(rec), ensure_ascii=False) + "\n")


def _parse_header(line: str) -> Optional[int]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"line 1: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise WorkloadError(f"line 1: missing {DATASET_FORMAT!r} header")
    if header.get("version") != DATASET_VERSION:
        raise WorkloadError(f"line 1: unsupported dataset version {header.get('version')!r}")
    dim = header.get("embedding_dim")
    if dim is not None and (not isinstance(dim, int) or dim < 1):
        raise WorkloadError(f"line 1: bad embedding_dim {dim!r}")
    return dim


def _parse_record(obj, embedding_dim: Optional[int]) -> PromptRecord:
    if not isinstance(obj, dict):
        raise WorkloadError("record is not a JSON object")
    for key in ("id", "prompt", "output_len"):
        if key not in obj:
            raise WorkloadError(f"missing required field {key!r}")
    if not isinstance(obj["id"], str) or not isinstance(obj["prompt"], str):
        raise WorkloadError("'id' and 'prompt' must be strings")
    samples = obj.get("output_len_samples")
    embedding = obj.get("embedding")
    if embedding is not None:
        if embedding_dim is None:
            raise WorkloadError("record has an embedding but the header declares none")
        if not isinstance(embedding, list) or len(embedding) != embedding_dim:
            got = len(embedding) if isinstance(embedding, list) else type(embedding).__name__
            raise WorkloadError(f"embedding length {got} != declared dimension {embedding_dim}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in embedding):
            raise WorkloadError("embedding values must be numbers")
    return PromptRecord(
        id=obj["id"],
        prompt_text=obj["prompt"],
        output_len=obj["output_len"],
        output_len_samples=tuple(samples) if samples is not None else None,
        embedding=tuple(embedding) if embedding is not None else None,
        prompt_len=obj.get("prompt_len") or 0,
    )


def load_dataset(path: str | Path, limit: Optional[int] = None) -> list[PromptRecord]:
    """Read a dataset file, validating every record.

    Errors name the 1-based physical line number (the header is line 1).
    """
    if limit is not None and limit < 0:
        raise WorkloadError(f"limit must be >= 0, got {limit}")
    records: list[PromptRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise WorkloadError("line 1: empty file or missing header")
        embedding_dim = _parse_header(first)
        for lineno, line in enumerate(fh, start=2):
            if limit is not None and len(records) >= limit:
                break
            if not line.strip():
                continue
            try:
                rec = _parse_record(json.loads(line), embedding_dim)
            except json.JSONDecodeError as exc:
                raise WorkloadError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except WorkloadError as exc:
                raise WorkloadError(f"line {lineno}: {exc}") from None
            if rec.id in seen:
                raise WorkloadError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def index_records(records: Iterable[PromptRecord]) -> dict[str, PromptRecord]:
    out: dict[str, PromptRecord] = {}
    for rec in records:
        if rec.id in out:
            raise WorkloadError(f"duplicate id {rec.id!r}")
        out[rec.id] = rec
    return out


# ---------------------------------------------------------------------------
# synthetic workloads
# ---------------------------------------------------------------------------

# Latent length scores are quantised to 4 decimal digits; digit k of slot j is
# written as the literal token SLOT_CHARS[j] + str(k) + SLOT_CHARS[j].
SLOT_CHARS = "kmpt"
_FILLER_VOCAB = (
    "please explain describe summarize write list compare outline detail "
    "answer question story poem essay email recipe code plan review "
    "history science travel music health market policy design theory "
    "example quickly briefly carefully simply clearly kindly today"
).split()


@dataclass(frozen=True)
class LengthModel:
    """Lognormal (or mixture of lognormals) output-length model.

    ``components`` holds ``(weight, mu, sigma)`` triples in log-token space.
    """

    components: tuple[tuple[float, float, float], ...]
    min_len: int = 1
    max_len: int = 8192

    def __post_init__(self):
        if not self.components:
            raise WorkloadError("length model needs at least one component")
        for w, _, sigma in self.components:
            if not sigma > 0:
                raise WorkloadError(f"sigma must be > 0, got {sigma}")
            if not w > 0:
                raise WorkloadError(f"mixture weight must be > 0, got {w}")
        if not 1 <= self.min_len <= self.max_len:
            raise WorkloadError(f"bad length bounds [{self.min_len}, {self.max_len}]")

    @classmethod
    def lognormal(cls, mu: float, sigma: float, min_len: int = 1, max_len: int = 8192) -> "LengthModel":
        return cls(((1.0, float(mu), float(sigma)),), min_len, max_len)

    @property
    def weights(self) -> np.ndarray:
        w = np.array([c[0] for c in self.components], dtype=float)
        return w / w.sum()

    def describe(self) -> str:
        if len(self.components) == 1:
            _, mu, sigma = self.components[0]
            return f"lognormal:{mu!r},{sigma!r}"
        parts = ";".join(f"{w!r},{mu!r},{s!r}" for w, mu, s in self.components)
        return f"mixture:{parts}"


def parse_length_model(spec: str, min_len: int = 1, max_len: int = 8192) -> LengthModel:
    """Parse ``lognormal:MU,SIGMA`` or ``mixture:W,MU,SIGMA;W,MU,SIGMA;...``."""
    kind, _, body = spec.strip().partition(":")
    try:
        if kind == "lognormal":
            mu, sigma = (float(v) for v in body.split(","))
            return LengthModel.lognormal(mu, sigma, min_len, max_len)
        if kind == "mixture":
            comps = []
            for part in body.split(";"):
                w, mu, sigma = (float(v) for v in part.split(","))
                comps.append((w, mu, sigma))
            return LengthModel(tuple(comps), min_len, max_len)
    except ValueError as exc:
        if isinstance(exc, WorkloadError):
            raise
        raise WorkloadError(f"cannot parse length model {spec!r}") from None
    raise WorkloadError(f"unknown length model {spec!r}; expected lognormal:MU,SIGMA or mixture:...")


def latent_tokens(code: int) -> list[str]:
    """Literal tokens encoding a 4-digit latent code (0..9999)."""
    digits = f"{code:04d}"
    return [f"{c}{d}{c}" for c, d in zip(SLOT_CHARS, digits)]


def latent_score(code: int) -> float:
    """Latent standardised score in [-5, 5) encoded by ``code``."""
    return code / 1000.0 - 5.0


def base_length(code: int, component: int, model: LengthModel) -> float:
    """Noise-free (unrounded, unclamped) length for a latent code.

    ``exp(mu_c + sigma_c * (code / 1000 - 5))``
    """
    _, mu, sigma = model.components[component]
    return math.exp(mu + sigma * latent_score(code))


def clamp_length(value: float, model: LengthModel) -> int:
    return int(min(model.max_len, max(model.min_len, round(value))))


def synthesize_dataset(
    n: int,
    length_model: LengthModel,
    seed: int,
    noise: float = 0.0,
    n_samples: int = 1,
    n_filler: int = 4,
    embedding_dim: int = 0,
    id_prefix: str = "p",
) -> list[PromptRecord]:
    """Generate ``n`` prompts whose output length is a known function of their text.

    Each prompt carries a latent code ``q`` in 0..9999 (from a standard normal
    draw ``z``, ``q = round((clip(z) + 5) * 1000)``) written as four literal
    tokens, plus a ``modeK`` token when the length model is a mixture.  The
    noise-free length is ``clamp(round(exp(mu_c + sigma_c * (q/1000 - 5))))``.

    With ``noise > 0`` each of the ``n_samples`` observed lengths is the base
    length times an independent ``Uniform(1 - noise, 1 + noise)`` factor, and
    ``output_len`` is their (floor) median.  ``embedding_dim > 0`` attaches a
    vector whose first entry is the latent score and the rest standard normal
    distractors.
    """
    if n < 1:
        raise WorkloadError(f"n must be >= 1, got {n}")
    if not 0.0 <= noise < 1.0:
        raise WorkloadError(f"noise must be in [0, 1), got {noise}")
    if n_samples < 1:
        raise WorkloadError(f"n_samples must be >= 1, got {n_samples}")
    if not 0 <= n_filler <= len(_FILLER_VOCAB):
        raise WorkloadError(f"n_filler must be in [0, {len(_FILLER_VOCAB)}]")

    rng = np.random.default_rng(seed)
    n_comp = len(length_model.components)
    comp = rng.choice(n_comp, size=n, p=length_model.weights)
    z = np.clip(rng.standard_normal(n), -4.9995, 4.9995)
    codes = np.rint((z + 5.0) * 1000.0).astype(int)
    factors = rng.uniform(1.0 - noise, 1.0 + noise, size=(n, n_samples)) if noise > 0 else None
    width = len(str(n - 1))

    records = []
    for i in range(n):
        code = int(codes[i])
        c = int(comp[i])
        filler = [str(w) for w in rng.choice(_FILLER_VOCAB, size=n_filler, replace=False)]
        tokens = filler + latent_tokens(code)
        if n_comp > 1:
            tokens.append(f"mode{c}")
        base = base_length(code, c, length_model)
        if factors is None:
            samples = None
            out_len = clamp_length(base, length_model)
        else:
            drawn = tuple(clamp_length(base * f, length_model) for f in factors[i])
            out_len = median_floor(drawn)
            samples = drawn if n_samples > 1 else None
        embedding = None
        if embedding_dim > 0:
            vec = rng.standard_normal(embedding_dim)
            vec[0] = latent_score(code)
            embedding = tuple(float(v) for v in vec)
        records.append(
            PromptRecord(
                id=f"{id_prefix}{i:0{width}d}",
                prompt_text=" ".join(tokens),
                output_len=out_len,
                output_len_samples=samples,
                embedding=embedding,
            )
        )
    return records


# ---------------------------------------------------------------------------
# arrival traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrivalTrace:
    entries: tuple[tuple[str, float], ...]
    seed: int
    mode: str
    rate: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("poisson", "burst"):
            raise WorkloadError(f"unknown trace mode {self.mode!r}")
        last = 0.0
        for pid, t in self.entries:
            if not t >= last:
                raise WorkloadError(f"arrival times must be non-negative and non-decreasing (at {pid!r})")
            last = t
        if self.mode == "burst" and any(t != 0.0 for _, t in self.entries):
            raise WorkloadError("burst traces must have every arrival at t=0")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def prompt_ids(self) -> list[str]:
        return [pid for pid, _ in self.entries]

    def check_resolves(self, records: dict[str, PromptRecord]) -> None:
        missing = [pid for pid, _ in self.entries if pid not in records]
        if missing:
            raise WorkloadError(f"{len(missing)} trace prompt ids not in dataset, e.g. {missing[0]!r}")


def generate_arrivals(
    records: Sequence[PromptRecord],
    mode: str = "poisson",
    rate: Optional[float] = None,
    seed: int = 0,
) -> ArrivalTrace:
    """Arrival trace over ``records`` in dataset order.

    Poisson: i.i.d. exponential gaps with mean ``1/rate``; the first request
    arrives after one gap.  Burst: everything at t=0.
    """
    if not records:
        raise WorkloadError("cannot generate arrivals for an empty dataset")
    ids = [r.id for r in records]
    if mode == "burst":
        return ArrivalTrace(tuple((pid, 0.0) for pid in ids), seed, "burst")
    if mode != "poisson":
        raise WorkloadError(f"unknown arrival mode {mode!r}")
    if rate is None or not rate > 0 or not math.isfinite(rate):
        raise WorkloadError(f"poisson rate must be > 0, got {rate!r}")
    gaps = np.random.default_rng(seed).exponential(1.0 / rate, size=len(ids))
    times = np.cumsum(gaps)
    return ArrivalTrace(tuple((pid, float(t)) for pid, t in zip(ids, times)), seed, "poisson", float(rate))


_TRACE_HEADER = re.compile(r"#\s*" + TRACE_FORMAT + r"\s+v(\d+)\s+(\{.*\})\s*$")


def write_trace(trace: ArrivalTrace, path: str | Path) -> None:
    meta = {"mode": trace.mode, "rate": trace.rate, "seed": trace.seed}
    buf = io.StringIO()
    buf.write(f"# {TRACE_FORMAT} v{TRACE_VERSION} {json.dumps(meta, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt_id", "arrival_time_s"])
    for pid, t in trace.entries:
        writer.writerow([pid, repr(t)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_trace(path: str | Path, records: Optional[dict[str, PromptRecord]] = None) -> ArrivalTrace:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        m = _TRACE_HEADER.match(fh.readline())
        if not m:
            raise WorkloadError(f"line 1: missing '# {TRACE_FORMAT} v{TRACE_VERSION} {{...}}' header")
        if int(m.group(1)) != TRACE_VERSION:
            raise WorkloadError(f"line 1: unsupported trace version {m.group(1)}")
        meta = json.loads(m.group(2))
        reader = csv.reader(fh)
        if next(reader, None) != ["prompt_id", "arrival_time_s"]:
            raise WorkloadError("line 2: expected column header 'prompt_id,arrival_time_s'")
        entries = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            try:
                pid, t = row
                entries.append((pid, float(t)))
            except ValueError:
                raise WorkloadError(f"line {lineno}: malformed trace row {row!r}") from None
    trace = ArrivalTrace(tuple(entries), int(meta.get("seed", 0)), meta.get("mode", "poisson"), meta.get("rate"))
    if records is not None:
        trace.check_resolves(records)
    return trace
