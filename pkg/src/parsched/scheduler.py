"""Admission ordering policies with starvation prevention.

All policies share one rule: requests that have waited longer than the
starvation threshold go first, oldest first; everyone else is admitted in
ascending cached score, with ties broken by (arrival_time, prompt_id).
FCFS simply uses the arrival time as its score.  Running requests are never
preempted.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .workload import PromptRecord

WAITING, RUNNING, FINISHED = "waiting", "running", "finished"
POLICY_NAMES = ("fcfs", "oracle_sjf", "pars", "pointwise_sjf", "listwise_sjf")
DEFAULT_STARVATION_THRESHOLD = 120.0

Scorer = Callable[[PromptRecord], float]


class SchedulingError(RuntimeError):
    pass


@dataclass
class Request:
    prompt_id: str
    arrival_time: float
    output_len: int
    prompt_len: int = 1
    state: str = WAITING
    tokens_generated: int = 0
    score: Optional[float] = None
    boosted: bool = False
    admit_time: Optional[float] = None
    finish_time: Optional[float] = None

    def admit(self, now: float) -> None:
        if self.state != WAITING:
            raise SchedulingError(f"{self.prompt_id}: cannot admit from state {self.state}")
        if now < self.arrival_time:
            raise SchedulingError(f"{self.prompt_id}: admitted at {now} before arrival {self.arrival_time}")
        self.state = RUNNING
        self.admit_time = now

    def step(self, now: float) -> bool:
        """Generate one token; returns True when the request just finished."""
        if self.state != RUNNING:
            raise SchedulingError(f"{self.prompt_id}: cannot decode in state {self.state}")
        self.tokens_generated += 1
        if self.tokens_generated == self.output_len:
            self.state = FINISHED
            self.finish_time = now
            return True
        return False

    def wait_time(self, now: float) -> float:
        return now - self.arrival_time


@dataclass(frozen=True)
class PolicyConfig:
    """An admission policy.

    ``scorer`` maps a prompt to a score (lower is admitted earlier) and is
    required for every policy except ``fcfs``.
    """

    name: str = "fcfs"
    scorer: Optional[Scorer] = None
    starvation_threshold: float = DEFAULT_STARVATION_THRESHOLD
    batch_limit: int = 32

    def __post_init__(self):
        if not self.starvation_threshold > 0:
            raise SchedulingError(f"starvation_threshold must be > 0, got {self.starvation_threshold}")
        if self.batch_limit < 1:
            raise SchedulingError(f"batch_limit must be >= 1, got {self.batch_limit}")
        if self.name != "fcfs" and self.scorer is None:
            raise SchedulingError(f"policy {self.name!r} needs a scorer")

    @property
    def is_fcfs(self) -> bool:
        return self.scorer is None


def enqueue(request: Request, record: PromptRecord, policy: PolicyConfig) -> Request:
    """Cache the policy score on a newly waiting request (scored exactly once)."""
    if request.state != WAITING:
        raise SchedulingError(f"{request.prompt_id}: enqueue requires a waiting request")
    if policy.is_fcfs:
        request.score = float(request.arrival_time)
        return request
    try:
        request.score = float(policy.scorer(record))
    except Exception as exc:
        raise SchedulingError(f"request {request.prompt_id} rejected: scorer failed ({exc})") from exc
    return request


def update_boosts(waiting: Sequence[Request], now: float, threshold: float) -> int:
    """Boost every request waiting strictly longer than ``threshold``."""
    if not threshold > 0:
        raise SchedulingError(f"threshold must be > 0, got {threshold}")
    newly = 0
    for req in waiting:
        if not req.boosted and now - req.arrival_time > threshold:
            req.boosted = True
            newly += 1
    return newly


def priority_key(req: Request, now: float, threshold: float) -> tuple:
    if req.boosted or now - req.arrival_time > threshold:
        return (0, req.arrival_time, req.prompt_id)
    return (1, req.score, req.arrival_time, req.prompt_id)


def select_batch(
    waiting: Sequence[Request],
    now: float,
    free_slots: int,
    policy: PolicyConfig,
) -> list[Request]:
    """The ``free_slots`` highest-priority waiting requests, in admission order."""
    if free_slots <= 0 or not waiting:
        return []
    for req in waiting:
        if req.arrival_time > now:
            raise SchedulingError(f"{req.prompt_id} has not arrived yet at t={now}")
        if req.score is None:
            raise SchedulingError(f"{req.prompt_id} was never enqueued")
    thr = policy.starvation_threshold
    return heapq.nsmallest(free_slots, waiting, key=lambda r: priority_key(r, now, thr))
