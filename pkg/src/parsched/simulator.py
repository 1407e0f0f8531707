"""Deterministic iteration-level simulator of an LLM serving engine.

Each engine iteration lasts ``t_base + t_decode * |R| + t_prefill_token *
(prompt tokens admitted at this iteration)`` and every running request emits
one token.  Continuous batching refills free slots at every iteration
boundary; static batching runs a formed batch to completion before forming
the next one.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .metrics import LatencySummary, latency_summary, speedup
from .scheduler import (
    FINISHED,
    WAITING,
    PolicyConfig,
    Request,
    enqueue,
    select_batch,
    update_boosts,
)
from .workload import ArrivalTrace, PromptRecord, index_records

REQUEST_CSV_COLUMNS = ("prompt_id", "arrival", "admit", "finish", "output_len", "per_token_latency_ms")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Per-iteration cost constants in seconds.

    Defaults (2 ms base, 0.5 ms per running request, 0.1 ms per prefilled
    prompt token) are invented desk-scale values, not measurements.
    """

    t_base: float = 0.002
    t_decode: float = 0.0005
    t_prefill_token: float = 0.0001

    def __post_init__(self):
        if min(self.t_base, self.t_decode, self.t_prefill_token) < 0 or not self.t_decode > 0:
            raise SimulationError("cost constants must be >= 0 and t_decode > 0")

    def iteration_time(self, n_running: int, prefill_tokens: int = 0) -> float:
        return self.t_base + self.t_decode * n_running + self.t_prefill_token * prefill_tokens


@dataclass(frozen=True)
class SimConfig:
    cost: CostModel = field(default_factory=CostModel)
    batching: str = "continuous"
    max_wait: float = 0.0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    seed: int = 0
    record_events: bool = True

    def __post_init__(self):
        if self.batching not in ("continuous", "static"):
            raise SimulationError(f"unknown batching mode {self.batching!r}")
        if self.max_wait < 0:
            raise SimulationError("static max_wait must be >= 0")

    @property
    def batch_limit(self) -> int:
        return self.policy.batch_limit


@dataclass(frozen=True)
class RequestRecord:
    prompt_id: str
    arrival: float
    admit: float
    finish: float
    output_len: int

    @property
    def per_token_latency(self) -> float:
        """End-to-end latency divided by output length, in seconds."""
        return (self.finish - self.arrival) / self.output_len

    @property
    def wait(self) -> float:
        return self.admit - self.arrival


@dataclass
class SimResult:
    policy: str
    records: list[RequestRecord]
    iterations: int
    makespan: float
    events: list[tuple[float, str, str]] = field(default_factory=list)
    max_running: int = 0

    def summary(self) -> LatencySummary:
        return latency_summary(self)

    def requests_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REQUEST_CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.prompt_id, repr(r.arrival), repr(r.admit), repr(r.finish),
                             r.output_len, repr(r.per_token_latency * 1000.0)])
        return buf.getvalue()

    def events_jsonl(self) -> str:
        return "".join(
            json.dumps({"t": t, "event": kind, "prompt_id": pid}) + "\n" for t, kind, pid in self.events
        )

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "requests.csv").write_text(self.requests_csv(), encoding="utf-8")
        if self.events:
            (d / "events.jsonl").write_text(self.events_jsonl(), encoding="utf-8")


class _Engine:
    def __init__(self, trace: ArrivalTrace, records: Sequence[PromptRecord], config: SimConfig):
        try:
            index = index_records(records)
            trace.check_resolves(index)
        except ValueError as exc:
            raise SimulationError(str(exc)) from exc
        ids = trace.prompt_ids
        if len(set(ids)) != len(ids):
            raise SimulationError("trace contains repeated prompt ids")
        self.config = config
        self.policy = config.policy
        self.cost = config.cost
        self.index = index
        self.pending = [
            Request(pid, t, index[pid].output_len, index[pid].prompt_len) for pid, t in trace.entries
        ]
        self.next_arrival = 0
        self.waiting: list[Request] = []
        self.running: list[Request] = []
        self.done: list[Request] = []
        self.now = 0.0
        self.iterations = 0
        self.max_running = 0
        self.events: list[tuple[float, str, str]] = []

    def log(self, kind: str, pid: str) -> None:
        if self.config.record_events:
            self.events.append((self.now, kind, pid))

    def arrivals_pending(self) -> bool:
        return self.next_arrival < len(self.pending)

    def take_arrivals(self) -> None:
        while self.arrivals_pending() and self.pending[self.next_arrival].arrival_time <= self.now:
            req = self.pending[self.next_arrival]
            self.next_arrival += 1
            enqueue(req, self.index[req.prompt_id], self.policy)
            self.waiting.append(req)
            self.log("arrive", req.prompt_id)

    def boost(self) -> None:
        if not self.waiting:
            return
        before = [r.boosted for r in self.waiting]
        if update_boosts(self.waiting, self.now, self.policy.starvation_threshold):
            for was, req in zip(before, self.waiting):
                if req.boosted and not was:
                    self.log("boost", req.prompt_id)

    def admit(self, free_slots: int) -> int:
        batch = select_batch(self.waiting, self.now, free_slots, self.policy)
        prefill = 0
        for req in batch:
            req.admit(self.now)
            self.running.append(req)
            prefill += req.prompt_len
            self.log("admit", req.prompt_id)
        if batch:
            self.waiting = [r for r in self.waiting if r.state == WAITING]
        self.max_running = max(self.max_running, len(self.running))
        return prefill

    def iterate(self, prefill: int) -> None:
        self.now += self.cost.iteration_time(len(self.running), prefill)
        self.iterations += 1
        for req in self.running:
            if req.step(self.now):
                self.log("finish", req.prompt_id)

    def reap(self) -> None:
        still = []
        for req in self.running:
            (self.done if req.state == FINISHED else still).append(req)
        self.running = still

    def run_continuous(self) -> None:
        limit = self.policy.batch_limit
        while self.arrivals_pending() or self.waiting or self.running:
            if not self.waiting and not self.running:
                self.now = max(self.now, self.pending[self.next_arrival].arrival_time)
            self.take_arrivals()
            self.boost()
            self.reap()
            prefill = self.admit(limit - len(self.running))
            if self.running:
                self.iterate(prefill)
            self.reap()

    def run_static(self) -> None:
        limit = self.policy.batch_limit
        max_wait = self.config.max_wait
        while self.arrivals_pending() or self.waiting:
            if not self.waiting:
                self.now = max(self.now, self.pending[self.next_arrival].arrival_time)
            self.take_arrivals()
            self.boost()
            oldest = self.waiting[0].arrival_time
            if len(self.waiting) >= limit or self.now >= oldest + max_wait:
                prefill = self.admit(limit)
                while self.running:
                    self.iterate(prefill)
                    prefill = 0
                    self.reap()
                continue
            wake = oldest + max_wait
            if self.arrivals_pending():
                wake = min(wake, self.pending[self.next_arrival].arrival_time)
            self.now = wake

    def result(self) -> SimResult:
        records = [
            RequestRecord(r.prompt_id, r.arrival_time, r.admit_time, r.finish_time, r.output_len)
            for r in self.pending
        ]
        return SimResult(self.policy.name, records, self.iterations, self.now, self.events, self.max_running)


def run(trace: ArrivalTrace, records: Sequence[PromptRecord], config: SimConfig) -> SimResult:
    """Simulate ``trace`` to completion; per-request records follow trace order."""
    engine = _Engine(trace, records, config)
    if config.batching == "continuous":
        engine.run_continuous()
    else:
        engine.run_static()
    unfinished = [r.prompt_id for r in engine.pending if r.state != FINISHED]
    if unfinished:
        raise SimulationError(f"{len(unfinished)} requests never finished, e.g. {unfinished[0]!r}")
    return engine.result()


@dataclass
class PolicyRow:
    policy: str
    summary: LatencySummary
    result: SimResult

    @property
    def speedup_vs_fcfs(self) -> Optional[float]:
        return self.summary.speedup_vs_fcfs


@dataclass
class ComparisonReport:
    rows: list[PolicyRow]

    def row(self, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def table(self) -> list[dict]:
        return [
            {
                "policy": r.policy,
                "n_requests": r.summary.count,
                "mean_per_token_ms": r.summary.mean_per_token_ms,
                "p90_per_token_ms": r.summary.p90_per_token_ms,
                "speedup_vs_fcfs": r.summary.speedup_vs_fcfs,
            }
            for r in self.rows
        ]


def compare_policies(
    trace: ArrivalTrace,
    records: Sequence[PromptRecord],
    base_config: SimConfig,
    policies: Sequence[PolicyConfig],
) -> ComparisonReport:
    """Run every policy on the same trace and cost model; speedups are vs the first FCFS row."""
    if len(policies) < 2:
        raise SimulationError("compare_policies needs at least two policies")
    rows = []
    for policy in policies:
        try:
            result = run(trace, records, replace(base_config, policy=policy))
        except Exception as exc:
            raise SimulationError(f"policy {policy.name}: {exc}") from exc
        rows.append(PolicyRow(policy.name, result.summary(), result))
    fcfs = next((r for r in rows if r.policy == "fcfs"), None)
    if fcfs is not None:
        base = fcfs.summary.mean_per_token_ms
        for r in rows:
            r.summary = replace(r.summary, speedup_vs_fcfs=speedup(base, r.summary.mean_per_token_ms))
    return ComparisonReport(rows)


def estimate_capacity(records: Sequence[PromptRecord], cost: CostModel, batch_limit: int) -> float:
    """Approximate saturated throughput in requests/second.

    A full batch of ``batch_limit`` requests turns over once per mean output
    length worth of full-batch iterations, plus one prefill per request.
    """
    if not records:
        raise SimulationError("empty dataset")
    mean_out = sum(r.output_len for r in records) / len(records)
    mean_prompt = sum(r.prompt_len for r in records) / len(records)
    per_request = mean_out * cost.iteration_time(batch_limit) / batch_limit + cost.t_prefill_token * mean_prompt
    return 1.0 / per_request
