"""Two-layer adaptive batching: fill-or-expire queues + deadline-margin triage.

Prefill latency grows linearly with batch size, T(b) = T0 + alpha*(b-1).
Each function queue flushes when full or when its delay budget expires;
under GPU contention, queues whose deadline margin is about to run out are
dispatched first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import FunctionSpec


def predict_ttft(function: FunctionSpec, b: int) -> float:
    """Prefill latency for a batch of ``b`` requests (ms)."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    return function.prefill_base_ms + function.prefill_marginal_ms * (b - 1)


def max_batch_size(function: FunctionSpec, free_gpu_mem_bytes: int | None = None) -> int:
    """Largest batch whose predicted TTFT stays within the SLO.

    When the target GPU is known, additionally capped by KV-cache room:
    floor(free_mem / kv_bytes_per_request). The SLO cap is never below 1.
    """
    if function.prefill_marginal_ms <= 0:
        slo_cap = None  # flat latency: SLO imposes no cap
    else:
        slo_cap = 1 + math.floor(
            (function.slo_ttft_ms - function.prefill_base_ms) / function.prefill_marginal_ms
        )
        slo_cap = max(1, slo_cap)
    if free_gpu_mem_bytes is not None and function.kv_cache_bytes_per_request > 0:
        mem_cap = free_gpu_mem_bytes // function.kv_cache_bytes_per_request
        slo_cap = mem_cap if slo_cap is None else min(slo_cap, mem_cap)
    if slo_cap is None:
        return 2**31  # effectively unbounded
    return int(slo_cap)


def batch_delay(function: FunctionSpec, n: int) -> float:
    """Remaining wait budget for a queue currently holding ``n`` requests (ms)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return max(0.0, function.slo_ttft_ms - predict_ttft(function, n))


def deadline_margin(function: FunctionSpec, b: int, waited_ms: float, m: int) -> float:
    """Slack before an SLO miss given ``m``-way contention; negative = predicted miss."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if waited_ms < 0:
        raise ValueError("waited_ms must be >= 0")
    return function.slo_ttft_ms - (waited_ms + m * predict_ttft(function, b))


@dataclass
class BatchQueue:
    """Pending requests of one function, bound to a target GPU."""

    function: FunctionSpec
    gpu_id: str
    max_batch: int
    pending: list = field(default_factory=list)  # (request_id, enqueue_ms)
    expire_deadline: float = math.inf

    @property
    def n(self) -> int:
        return len(self.pending)

    def oldest_wait(self, now: float) -> float:
        if not self.pending:
            return 0.0
        return max(0.0, now - self.pending[0][1])

    def enqueue(self, request_id, now: float) -> None:
        self.pending.append((request_id, now))
        anchor = self.pending[0][1]
        candidate = anchor + batch_delay(self.function, self.n)
        # Deadlines only shrink as the batch grows; the first request's SLO
        # is the binding one.
        self.expire_deadline = min(self.expire_deadline, candidate)

    def take(self, count: int) -> list:
        taken = self.pending[:count]
        self.pending = self.pending[count:]
        if self.pending:
            anchor = self.pending[0][1]
            self.expire_deadline = anchor + batch_delay(self.function, self.n)
        else:
            self.expire_deadline = math.inf
        return [rid for rid, _ in taken]


@dataclass(frozen=True)
class FlushDecision:
    function_id: str
    gpu_id: str
    request_ids: tuple
    reason: str  # fill | expire | margin
    margin_ms: float | None = None


def schedule_round(queues: list[BatchQueue], contention: dict, now: float,
                   tick_ms: float = 10.0, guard_ms: float | None = None) -> list[FlushDecision]:
    """One scheduler round over all non-empty queues.

    ``contention`` maps gpu id -> number of batches currently executing or
    dispatched. Full or expired queues always flush; among the rest, any
    queue whose deadline margin would fall below the guard (default: one
    marginal prefill step, alpha) if deferred by one tick is flushed, in
    ascending-margin order. Flushes increment the target GPU's contention
    for margin computations within the same round.
    """
    m = dict(contention)
    decisions: list[FlushDecision] = []
    remaining: list[BatchQueue] = []

    def flush(q: BatchQueue, reason: str, margin=None):
        size = min(q.n, q.max_batch)
        rids = q.take(size)
        decisions.append(FlushDecision(q.function.id, q.gpu_id, tuple(rids), reason, margin))
        m[q.gpu_id] = m.get(q.gpu_id, 0) + 1

    for q in sorted(queues, key=lambda q: q.function.id):
        if q.n == 0:
            continue
        if q.n >= q.max_batch:
            flush(q, "fill")
        elif q.expire_deadline <= now:
            flush(q, "expire")
        else:
            remaining.append(q)

    while remaining:
        margins = []
        for q in remaining:
            m_eff = m.get(q.gpu_id, 0) + 1  # contention including this batch
            delta = deadline_margin(q.function, q.n, q.oldest_wait(now), m_eff)
            margins.append((delta, q.function.id, q))
        margins.sort(key=lambda t: (t[0], t[1]))
        delta, _, q = margins[0]
        guard = q.function.prefill_marginal_ms if guard_ms is None else guard_ms
        if delta - tick_ms < guard:
            flush(q, "margin", margin=delta)
            remaining.remove(q)
        else:
            break

    return decisions
