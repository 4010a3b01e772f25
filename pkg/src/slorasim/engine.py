"""Deterministic discrete-event simulator for serverless LoRA-LLM serving.

Binds the pre-loading, batching, and offloading policies to a cluster:
request lifecycle, cold-start latency composition, backbone-sharing memory
ledger, processor-sharing contention, keep-alive, and cost accounting.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from . import batching, offload, preload, workload
from .core import (
    ArtifactKind,
    ClusterSpec,
    ConfigError,
    FunctionCatalog,
    FunctionSpec,
    TierKind,
)
from .ledger import Resident, ResidencyLedger

EVENT_KINDS = (
    "RequestArrival",
    "SchedulerTick",
    "BatchDispatch",
    "PrefillComplete",
    "TokenEmitted",
    "RequestComplete",
    "PreloadComplete",
    "EvictionComplete",
    "KeepAliveExpire",
    "ReplanTimer",
)
_KIND_INDEX = {k: i for i, k in enumerate(EVENT_KINDS)}

_BREAKDOWN_KEYS = (
    "container_init", "library_load", "backbone_load", "adapter_load", "kernel_compile",
)


@dataclass(frozen=True)
class Pricing:
    gpu_per_s: float
    mem_gb_per_s: float
    cpu_core_per_s: float

    @classmethod
    def from_dict(cls, doc: dict) -> "Pricing":
        src = doc.get("pricing", doc)
        try:
            return cls(
                gpu_per_s=float(src["gpu_per_s"]),
                mem_gb_per_s=float(src["mem_gb_per_s"]),
                cpu_core_per_s=float(src["cpu_core_per_s"]),
            )
        except KeyError as exc:
            raise ConfigError(f"pricing config: missing key {exc}") from None


@dataclass
class SimConfig:
    tick_ms: float = 10.0
    guard: str = "alpha"               # "alpha" or a fixed number of ms
    guard_fixed_ms: float = 0.0
    keep_alive_s: float = 600.0
    # Minimum idle time before a function's resident gear may be reclaimed
    # just to widen another batch's KV room (keep-alive still governs full
    # release). Sub-second-idle gear is presumed about to be reused.
    reclaim_idle_s: float = 3.0
    replan_period_s: float = 10.0
    rate_window_s: float = 300.0
    rate_half_life_s: float = 60.0
    demotion_gbps: float = 1.0
    offload_enabled: bool = True       # False reproduces ablation NDO
    preload_enabled: bool = True       # False reproduces ablation NPL
    sharing_enabled: bool = True       # False reproduces ablation NBS
    fixed_batching: tuple | None = None  # (size, delay_ms) for ablation NAB
    seed: int = 0
    keep_event_log: bool = False
    drain_limit_s: float = 600.0       # give up on stalled work this long after the last arrival

    @property
    def guard_ms(self) -> float | None:
        return None if self.guard == "alpha" else self.guard_fixed_ms


@dataclass
class RequestRecord:
    request_id: int
    function_id: str
    arrival_ms: float
    prompt_tokens: int
    output_tokens: int
    dispatch_ms: float = math.nan
    first_token_ms: float = math.nan
    completion_ms: float = math.nan
    batch_size: int = 0
    cold_start_breakdown: dict = field(default_factory=lambda: dict.fromkeys(_BREAKDOWN_KEYS, 0.0))

    @property
    def ttft_ms(self) -> float:
        return self.first_token_ms - self.arrival_ms

    @property
    def e2e_ms(self) -> float:
        return self.completion_ms - self.arrival_ms

    @property
    def tpot_ms(self) -> float:
        if self.output_tokens <= 1:
            return math.nan
        return (self.completion_ms - self.first_token_ms) / (self.output_tokens - 1)

    @property
    def cold_start_ms(self) -> float:
        return sum(self.cold_start_breakdown.values())


@dataclass
class FunctionUsage:
    """Billable resource-time integrals for one function instance."""

    gpu_seconds: float = 0.0       # fractional GPU (memory share) x seconds
    host_gb_seconds: float = 0.0
    cpu_core_seconds: float = 0.0


@dataclass
class SimulationResult:
    records: list
    usage: dict                    # function id -> FunctionUsage
    duration_ms: float
    peak_batch_size: int
    peak_gpu_used: dict            # gpu id -> peak bytes used
    event_log: list
    warm_ttft_ms: dict             # function id -> T0 reference for SLO rules

    @property
    def mean_e2e_ms(self) -> float:
        done = [r.e2e_ms for r in self.records if not math.isnan(r.e2e_ms)]
        return sum(done) / len(done) if done else 0.0


def monetary_cost(usage: dict, pricing: Pricing) -> float:
    """Total cost of a run: fractional GPU-seconds, host GB-seconds, vCPU-seconds."""
    total = 0.0
    for u in usage.values():
        total += (
            u.gpu_seconds * pricing.gpu_per_s
            + u.host_gb_seconds * pricing.mem_gb_per_s
            + u.cpu_core_seconds * pricing.cpu_core_per_s
        )
    return total


def cost_effectiveness(mean_e2e_ms: float, total_cost: float) -> float:
    """1 / (mean E2E seconds x monetary cost)."""
    if mean_e2e_ms <= 0 or total_cost <= 0:
        raise ValueError("cost-effectiveness needs positive latency and cost")
    return 1.0 / ((mean_e2e_ms / 1000.0) * total_cost)


def privatize_backbones(catalog: FunctionCatalog) -> FunctionCatalog:
    """No-sharing transform: each adapter carries its own backbone copy."""
    out = []
    for fn in catalog:
        if fn.is_adapter:
            owner = catalog.backbone_owner(fn)
            backbone_art = owner.artifact(ArtifactKind.BACKBONE_MODEL)
            out.append(FunctionSpec(
                id=fn.id,
                backbone_id=None,
                artifacts=fn.artifacts + (backbone_art,),
                slo_ttft_ms=fn.slo_ttft_ms,
                prefill_base_ms=fn.prefill_base_ms,
                prefill_marginal_ms=fn.prefill_marginal_ms,
                decode_ms_per_token=fn.decode_ms_per_token,
                kv_cache_bytes_per_request=fn.kv_cache_bytes_per_request,
                container_init_ms=fn.container_init_ms,
            ))
        else:
            out.append(fn)
    return FunctionCatalog(out)


def cold_start_latency(fn: FunctionSpec, catalog: FunctionCatalog,
                       residency: ResidencyLedger, container_id: str, gpu_id: str,
                       now_ms: float, warm_container: bool,
                       ) -> tuple[float, dict]:
    """Sequential cold-start latency for serving ``fn`` on the given instance.

    Artifacts load in dependency order; pre-loaded (or shared-resident)
    artifacts contribute zero, container-resident models contribute only the
    container-to-GPU transfer.
    """
    breakdown = dict.fromkeys(_BREAKDOWN_KEYS, 0.0)
    if not warm_container:
        breakdown["container_init"] = fn.container_init_ms

    def remaining(res) -> float:
        return max(0.0, res.usable_at_ms - now_ms)

    lib = fn.artifact(ArtifactKind.LIBRARY)
    if lib is not None:
        res = residency.container_resident(container_id, fn.id, ArtifactKind.LIBRARY)
        breakdown["library_load"] = remaining(res) if res is not None else lib.load_cold_ms

    def model_term(owner_id: str, art) -> float:
        res = residency.gpu_resident(gpu_id, owner_id, art.kind)
        if res is not None:
            return remaining(res)
        hit = residency.find_container_resident(owner_id, art.kind, gpu_id)
        if hit is not None:
            _, cres = hit
            return remaining(cres) + art.load_from_container_ms
        return art.load_cold_ms

    owner = catalog.backbone_owner(fn) or fn
    backbone_art = owner.artifact(ArtifactKind.BACKBONE_MODEL)
    if backbone_art is not None:
        breakdown["backbone_load"] = model_term(owner.id, backbone_art)

    adapter_art = fn.artifact(ArtifactKind.ADAPTER_MODEL)
    if adapter_art is not None:
        breakdown["adapter_load"] = model_term(fn.id, adapter_art)

    kern = fn.artifact(ArtifactKind.KERNEL)
    if kern is not None:
        res = residency.gpu_resident(gpu_id, fn.id, ArtifactKind.KERNEL)
        breakdown["kernel_compile"] = remaining(res) if res is not None else kern.load_cold_ms

    return sum(breakdown.values()), breakdown


@dataclass
class _Batch:
    id: int
    function_id: str
    gpu_id: str
    container_id: str | None
    request_ids: tuple
    created_ms: float
    dispatch_ms: float = math.nan
    kv_bytes: int = 0
    prefill_work_ms: float = 0.0
    decode_step: int = 0
    max_decode_steps: int = 0
    cold_breakdown: dict = field(default_factory=dict)
    done: bool = False

    @property
    def size(self) -> int:
        return len(self.request_ids)


class _GpuRuntime:
    """Processor-sharing execution state of one GPU."""

    def __init__(self):
        self.prefill_jobs: dict[int, float] = {}   # batch id -> remaining work ms
        self.decode_batches: set[int] = set()
        self.last_update_ms = 0.0
        self.version = 0

    @property
    def m(self) -> int:
        return len(self.prefill_jobs) + len(self.decode_batches)

    def advance(self, now: float):
        elapsed = now - self.last_update_ms
        if elapsed > 0 and self.prefill_jobs:
            rate = 1.0 / self.m
            for bid in self.prefill_jobs:
                self.prefill_jobs[bid] -= elapsed * rate
        self.last_update_ms = now


class Engine:
    def __init__(self, config: SimConfig, cluster: ClusterSpec, functions,
                 trace: workload.Trace):
        self.config = config
        self.cluster = cluster
        catalog = functions if isinstance(functions, FunctionCatalog) else FunctionCatalog(functions)
        if not config.sharing_enabled:
            catalog = privatize_backbones(catalog)
        self.catalog = catalog
        self.trace = trace
        self.residency = ResidencyLedger(cluster)

        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.event_log: list = []

        self.records: dict[int, RequestRecord] = {}
        self.queues: dict[str, batching.BatchQueue] = {}
        self.deferred: list[_Batch] = []
        self.batches: dict[int, _Batch] = {}
        self._next_batch_id = 0
        self.gpu_rt = {gid: _GpuRuntime() for gid in cluster.gpu_ids}

        self.warm: dict[tuple, float] = {}      # (fid, cid) -> last active ms
        self.active_batches: dict[str, int] = {f.id: 0 for f in catalog}
        # Every function counts as touched at t=0 so freshly planned gear is
        # not reclaimed before it ever serves a request.
        self.last_active: dict[str, float] = {
            fid: 0.0 for fid in self.catalog.functions}
        self.arrival_history: dict[str, list] = {f.id: [] for f in catalog}
        self.outstanding = 0
        self.remaining_arrivals = len(trace)
        self.current_plan = None

        self.usage = {f.id: FunctionUsage() for f in catalog}
        self._cost_last_ms = 0.0
        self._cost_snapshot: dict[str, tuple] = {f.id: (0.0, 0.0, 0.0) for f in catalog}

        self.peak_batch_size = 0
        self.peak_gpu_used = {gid: 0 for gid in cluster.gpu_ids}
        self._benefit_cache: tuple | None = None

    # -- event plumbing -------------------------------------------------------

    def _push(self, time_ms: float, kind: str, payload=None):
        heapq.heappush(self._heap, (time_ms, _KIND_INDEX[kind], self._seq, kind, payload))
        self._seq += 1

    def _log(self, kind: str, desc: str):
        if self.config.keep_event_log:
            self.event_log.append(f"{self.now:.6f} {kind} {desc}")

    # -- cost metering --------------------------------------------------------

    def _cost_accrue(self):
        dt_s = (self.now - self._cost_last_ms) / 1000.0
        if dt_s > 0:
            for fid, (gpu_frac, gb, cores) in self._cost_snapshot.items():
                u = self.usage[fid]
                u.gpu_seconds += gpu_frac * dt_s
                u.host_gb_seconds += gb * dt_s
                u.cpu_core_seconds += cores * dt_s
        self._cost_last_ms = self.now

    def _cost_resnapshot(self):
        gpu_cap = {gid: cap for gid, cap in self.cluster.gpus}
        per_fn_gpu = {f.id: 0.0 for f in self.catalog}
        for gid, g in self.residency.gpus.items():
            cap = gpu_cap[gid]
            for (fid, _kind), res in g.resident.items():
                per_fn_gpu[fid] += res.size_bytes / cap
            for fid in g.overhead_fns:
                per_fn_gpu[fid] += self.residency.context_overhead / cap
            for bid, nbytes in g.kv.items():
                b = self.batches.get(bid)
                if b is not None:
                    per_fn_gpu[b.function_id] += nbytes / cap
        per_fn_gb = {f.id: 0.0 for f in self.catalog}
        for c in self.residency.containers.values():
            for (fid, _kind), res in c.resident.items():
                per_fn_gb[fid] += res.size_bytes / 1e9
        for f in self.catalog:
            fid = f.id
            cores = 1.0 if (
                self.active_batches[fid] > 0
                or any(k[0] == fid for k in self.warm)
            ) else 0.0
            self._cost_snapshot[fid] = (per_fn_gpu[fid], per_fn_gb[fid], cores)

    def _track_peaks(self):
        for gid in self.cluster.gpu_ids:
            used = self.residency.gpu_used(gid)
            if used > self.peak_gpu_used[gid]:
                self.peak_gpu_used[gid] = used

    # -- residency helpers ----------------------------------------------------

    def _current_rates(self) -> workload.ArrivalStats:
        records = []
        for fid, times in self.arrival_history.items():
            records.extend(
                workload.TraceRecord(fid, t, 1, 1) for t in times
            )
        records.sort(key=lambda r: (r.arrival_ms, r.function_id))
        hist = workload.Trace(tuple(records))
        return workload.estimate_rates(
            hist, self.config.rate_window_s, self.config.rate_half_life_s, self.now)

    def _current_benefits(self) -> preload.BenefitTable:
        """Benefit table for the current second (memoized: rate estimates
        decay slowly, so eviction values refresh at 1 s granularity and on
        every arrival)."""
        key = math.floor(self.now / 1000.0)
        if self._benefit_cache is None or self._benefit_cache[0] != key:
            table = preload.compute_benefits(self.catalog, self._current_rates())
            self._benefit_cache = (key, table)
        return self._benefit_cache[1]

    def _resident_values(self, gid: str) -> list[offload.ResidentValue]:
        """Current value of each GPU-resident artifact, from the live rate snapshot."""
        benefits = self._current_benefits()
        out = []
        for res in self.residency.gpu_residents(gid):
            entry = benefits.get(res.function_id, res.kind, TierKind.GPU)
            value = entry.value if entry is not None else 0.0
            out.append(offload.ResidentValue(res.function_id, res.kind, res.size_bytes, value))
        return out

    def _protected_on(self, gid: str, extra=(), include_waiting: bool = False) -> set:
        """Functions whose artifacts an eviction must not touch: those with a
        dispatched (memory-holding) batch on the GPU. With include_waiting,
        functions with queued or deferred work routed here are protected too —
        used when an eviction would merely widen KV-cache room, so a batch
        cannot steal the gear of work that is about to run. A function whose
        own backbone is absent must displace someone, so it ignores waiting
        protection (otherwise it could starve forever)."""
        protected = set(extra)

        def _pin(fid: str) -> None:
            protected.add(fid)
            owner = self.catalog.backbone_owner(self.catalog.get(fid))
            if owner is not None:
                protected.add(owner.id)

        for b in self.batches.values():
            if b.gpu_id == gid and not b.done and not math.isnan(b.dispatch_ms):
                _pin(b.function_id)
        if include_waiting:
            for b in self.deferred:
                if b.gpu_id == gid:
                    _pin(b.function_id)
            for q in self.queues.values():
                if q.n > 0 and q.gpu_id == gid:
                    _pin(q.function.id)
        return protected

    def _reclaimable(self, fid: str) -> bool:
        """Gear idle past the reclaim floor may be taken to widen KV room;
        anything hotter is presumed about to be reused and is left alone
        (a homeless function displacing a backbone is exempt)."""
        last = self.last_active.get(fid, 0.0)
        return self.now - last >= self.config.reclaim_idle_s * 1000.0

    # -- lifecycle ------------------------------------------------------------

    def run(self) -> SimulationResult:
        last_arrival = 0.0
        for i, rec in enumerate(self.trace):
            self._push(rec.arrival_ms, "RequestArrival", (i, rec))
            last_arrival = max(last_arrival, rec.arrival_ms)
        self._drain_deadline_ms = last_arrival + self.config.drain_limit_s * 1000.0
        if len(self.trace) > 0:
            self._push(0.0, "SchedulerTick", None)
            if self.config.preload_enabled:
                self._push(0.0, "ReplanTimer", None)

        while self._heap:
            time_ms, _, _, kind, payload = heapq.heappop(self._heap)
            self.now = time_ms
            self._cost_accrue()
            handler = getattr(self, f"_on_{_snake(kind)}")
            handler(payload)
            self._cost_resnapshot()
            self._track_peaks()
            self.residency.assert_conserved()

        records = [self.records[rid] for rid in sorted(self.records)]
        warm_ttft = {f.id: f.prefill_base_ms for f in self.catalog}
        return SimulationResult(
            records=records,
            usage=self.usage,
            duration_ms=self.now,
            peak_batch_size=self.peak_batch_size,
            peak_gpu_used=self.peak_gpu_used,
            event_log=self.event_log,
            warm_ttft_ms=warm_ttft,
        )

    # -- handlers -------------------------------------------------------------

    def _on_request_arrival(self, payload):
        rid, rec = payload
        self.remaining_arrivals -= 1
        self.outstanding += 1
        fn = self.catalog.get(rec.function_id)
        self.records[rid] = RequestRecord(
            rid, fn.id, self.now, rec.prompt_tokens, rec.output_tokens)
        self.arrival_history[fn.id].append(self.now)
        self._benefit_cache = None
        self._log("RequestArrival", f"req={rid} fn={fn.id}")

        q = self.queues.get(fn.id)
        if q is None or q.n == 0:
            gid = self._route(fn)
            q = batching.BatchQueue(function=fn, gpu_id=gid, max_batch=1)
            self.queues[fn.id] = q
        q.max_batch = self._queue_cap(fn, q.gpu_id)
        q.enqueue(rid, self.now)

    def _route(self, fn: FunctionSpec) -> str:
        """Instance selection: minimal predicted cold start, backbone locality."""
        owner = self.catalog.backbone_owner(fn) or fn
        floor_bytes = sum(
            a.size_bytes for a in (owner.artifact(ArtifactKind.BACKBONE_MODEL),
                                   fn.artifact(ArtifactKind.ADAPTER_MODEL),
                                   fn.artifact(ArtifactKind.KERNEL))
            if a is not None
        ) + fn.kv_cache_bytes_per_request
        scored = []
        for gid in self.cluster.gpu_ids:
            if self.cluster.gpu_capacity(gid) < floor_bytes:
                continue  # the function's resident set can never fit here
            cid = self._pick_container(fn, gid)
            warm = (fn.id, cid) in self.warm if cid else False
            cold, _ = cold_start_latency(
                fn, self.catalog, self.residency, cid, gid, self.now, warm)
            hosts_backbone = self.residency.gpu_resident(
                gid, owner.id, ArtifactKind.BACKBONE_MODEL) is not None
            # A GPU where even a single-request dispatch can never claim
            # memory ranks behind every feasible one, whatever its cold start
            # says. In-flight KV reservations count as available here: they
            # drain when their batches finish, unlike resident gear.
            credit = (self.residency.gpu_free(gid)
                      + sum(self.residency.gpus[gid].kv.values()))
            if self.config.offload_enabled:
                protected = self._protected_on(
                    gid, extra={fn.id, owner.id}, include_waiting=hosts_backbone)
                credit += sum(
                    r.size_bytes for r in self.residency.gpu_residents(gid)
                    if r.function_id not in protected
                    and (not hosts_backbone
                         or (r.kind is not ArtifactKind.BACKBONE_MODEL
                             and self._reclaimable(r.function_id))))
            need = (self._fixed_dispatch_bytes(fn, gid)
                    + fn.kv_cache_bytes_per_request)
            scored.append((0 if need <= credit else 1, cold,
                           0 if hosts_backbone else 1,
                           -self.residency.gpu_free(gid), gid))
        if not scored:
            raise ConfigError(
                f"function {fn.id} cannot fit on any GPU in this cluster")
        scored.sort()
        return scored[0][4]

    def _pick_container(self, fn: FunctionSpec, gid: str) -> str | None:
        attached = self.cluster.containers_of(gid)
        if not attached:
            return None
        for cid in attached:
            if (fn.id, cid) in self.warm:
                return cid
        for cid in attached:
            if self.residency.container_resident(cid, fn.id, ArtifactKind.LIBRARY):
                return cid
        return max(attached, key=lambda c: (self.residency.container_free(c), c))

    def _fixed_dispatch_bytes(self, fn: FunctionSpec, gid: str) -> int:
        """GPU bytes a dispatch must add beyond per-request KV cache:
        whichever of backbone, adapter, kernel, and process context are not
        already resident on this GPU."""
        owner = self.catalog.backbone_owner(fn) or fn
        fixed = 0
        holds_non_backbone = any(
            k[0] == fn.id and k[1] is not ArtifactKind.BACKBONE_MODEL
            for k in self.residency.gpus[gid].resident)
        for fid, kind in ((owner.id, ArtifactKind.BACKBONE_MODEL),
                          (fn.id, ArtifactKind.ADAPTER_MODEL),
                          (fn.id, ArtifactKind.KERNEL)):
            art = (owner if fid == owner.id else fn).artifact(kind)
            if art is None:
                continue
            if self.residency.gpu_resident(gid, fid, kind) is None:
                fixed += art.size_bytes
                if kind is not ArtifactKind.BACKBONE_MODEL:
                    holds_non_backbone = True
        if holds_non_backbone and fn.id not in self.residency.gpus[gid].overhead_fns:
            fixed += self.residency.context_overhead
        return fixed

    def _queue_cap(self, fn: FunctionSpec, gid: str) -> int:
        # Free-for-KV bytes: with offloading on, idle functions' resident
        # artifacts can be reclaimed for KV cache; without it only strictly
        # free memory bounds the batch. Gear the dispatch would have to load
        # (backbone, adapter, kernel, process context) comes off the top.
        free = self.residency.gpu_free(gid) - self._fixed_dispatch_bytes(fn, gid)
        if self.config.offload_enabled:
            owner = self.catalog.backbone_owner(fn) or fn
            hosts_backbone = (
                owner.artifact(ArtifactKind.BACKBONE_MODEL) is None
                or self.residency.gpu_resident(
                    gid, owner.id, ArtifactKind.BACKBONE_MODEL) is not None)
            protected = self._protected_on(
                gid, extra={fn.id, owner.id}, include_waiting=hosts_backbone)
            free += sum(
                r.size_bytes for r in self.residency.gpu_residents(gid)
                if r.function_id not in protected
                and (not hosts_backbone
                     or (r.kind is not ArtifactKind.BACKBONE_MODEL
                         and self._reclaimable(r.function_id)))
            )
        if self.config.fixed_batching is not None:
            size, _ = self.config.fixed_batching
            return max(1, int(size))
        return max(1, batching.max_batch_size(fn, free))

    def _on_scheduler_tick(self, _):
        # Retry batches parked on memory shortage before admitting new ones;
        # head-of-line per GPU, so one stuck batch cannot thrash the round.
        still = []
        blocked_gpus: set = set()
        for b in self.deferred:
            if b.gpu_id in blocked_gpus or not self._dispatch_or_shrink(b, still):
                still.append(b)
                blocked_gpus.add(b.gpu_id)
        self.deferred = still
        waiting_fns = {b.function_id for b in self.deferred}

        live = []
        for fid in sorted(self.queues):
            q = self.queues[fid]
            # A function with a memory-blocked batch keeps queueing; its
            # requests flush as one larger batch once memory frees.
            if q.n == 0 or fid in waiting_fns:
                continue
            q.max_batch = self._queue_cap(q.function, q.gpu_id)
            live.append(q)

        contention = {gid: 0 for gid in self.cluster.gpu_ids}
        for b in self.batches.values():
            if not b.done:
                contention[b.gpu_id] += 1

        if self.config.fixed_batching is not None:
            decisions = self._fixed_round(live)
        else:
            decisions = batching.schedule_round(
                live, contention, self.now,
                tick_ms=self.config.tick_ms, guard_ms=self.config.guard_ms)

        for d in decisions:
            if not d.request_ids:
                continue
            b = _Batch(
                id=self._next_batch_id, function_id=d.function_id, gpu_id=d.gpu_id,
                container_id=None, request_ids=d.request_ids, created_ms=self.now)
            self._next_batch_id += 1
            self.batches[b.id] = b
            self._push(self.now, "BatchDispatch", b.id)
            self._log("SchedulerTick", f"flush fn={d.function_id} n={len(d.request_ids)} reason={d.reason}")

        if self.outstanding > 0 or self.remaining_arrivals > 0 or self.deferred:
            if self.now <= self._drain_deadline_ms:
                self._push(self.now + self.config.tick_ms, "SchedulerTick", None)
            else:
                self._log("SchedulerTick", f"drain limit hit; abandoning {self.outstanding} requests")

    def _fixed_round(self, live) -> list:
        size, delay_ms = self.config.fixed_batching
        decisions = []
        for q in live:
            if q.n >= size or q.oldest_wait(self.now) >= delay_ms:
                rids = q.take(min(q.n, int(size)))
                decisions.append(batching.FlushDecision(
                    q.function.id, q.gpu_id, tuple(rids), "fixed"))
        return decisions

    def _dispatch_or_shrink(self, b: _Batch, leftover: list) -> bool:
        """Retry a memory-deferred batch; if the whole batch cannot fit but a
        prefix can, dispatch that prefix and keep the remainder deferred."""
        if self._try_dispatch(b):
            return True
        fn = self.catalog.get(b.function_id)
        # Memory on the routed GPU may have filled since this batch was cut;
        # if another GPU now predicts a cheaper start, move the batch there.
        alt = self._route(fn)
        if alt != b.gpu_id:
            self._log("SchedulerTick",
                      f"reroute fn={b.function_id} {b.gpu_id} -> {alt}")
            b.gpu_id = alt
            if self._try_dispatch(b):
                return True
        room = self._queue_cap(fn, b.gpu_id)
        if b.size <= 1 or room < 1 or room >= b.size:
            return False
        head = _Batch(
            id=self._next_batch_id, function_id=b.function_id, gpu_id=b.gpu_id,
            container_id=None, request_ids=b.request_ids[:room],
            created_ms=b.created_ms)
        self._next_batch_id += 1
        if not self._try_dispatch(head):
            return False
        self.batches[head.id] = head
        tail = _Batch(
            id=self._next_batch_id, function_id=b.function_id, gpu_id=b.gpu_id,
            container_id=None, request_ids=b.request_ids[room:],
            created_ms=b.created_ms)
        self._next_batch_id += 1
        self.batches[tail.id] = tail
        del self.batches[b.id]
        leftover.append(tail)
        self._log("SchedulerTick",
                  f"split fn={b.function_id} n={b.size} -> {head.size}+{tail.size}")
        return True

    def _on_batch_dispatch(self, batch_id: int):
        b = self.batches[batch_id]
        if not self._try_dispatch(b):
            self.deferred.append(b)

    def _try_dispatch(self, b: _Batch) -> bool:
        fn = self.catalog.get(b.function_id)
        gid = b.gpu_id
        cid = self._pick_container(fn, gid)
        owner = self.catalog.backbone_owner(fn) or fn

        # GPU bytes this dispatch must add.
        needed = b.size * fn.kv_cache_bytes_per_request
        loads_gpu = []
        backbone_art = owner.artifact(ArtifactKind.BACKBONE_MODEL)
        if backbone_art is not None and self.residency.gpu_resident(
                gid, owner.id, ArtifactKind.BACKBONE_MODEL) is None:
            loads_gpu.append((owner.id, backbone_art))
            needed += backbone_art.size_bytes
        adapter_art = fn.artifact(ArtifactKind.ADAPTER_MODEL)
        if adapter_art is not None and self.residency.gpu_resident(
                gid, fn.id, ArtifactKind.ADAPTER_MODEL) is None:
            loads_gpu.append((fn.id, adapter_art))
            needed += adapter_art.size_bytes
        kern = fn.artifact(ArtifactKind.KERNEL)
        if kern is not None and self.residency.gpu_resident(
                gid, fn.id, ArtifactKind.KERNEL) is None:
            loads_gpu.append((fn.id, kern))
            needed += kern.size_bytes
        if fn.id not in self.residency.gpus[gid].overhead_fns:
            will_hold_process = any(
                art.kind is not ArtifactKind.BACKBONE_MODEL for _, art in loads_gpu
            ) or any(
                k[0] == fn.id and k[1] is not ArtifactKind.BACKBONE_MODEL
                for k in self.residency.gpus[gid].resident
            )
            if will_hold_process:
                needed += self.residency.context_overhead

        free = self.residency.gpu_free(gid)
        if needed > free:
            if not self.config.offload_enabled:
                return False
            needs_backbone_load = any(
                art.kind is ArtifactKind.BACKBONE_MODEL for _, art in loads_gpu)
            protected = self._protected_on(
                gid, extra={fn.id, owner.id},
                include_waiting=not needs_backbone_load)
            # Backbones are only displaced by a function that has to load its
            # own; a dispatch that merely widens KV room never takes one.
            def _evictable(r) -> bool:
                if r.function_id in protected:
                    return False
                if needs_backbone_load:
                    return True
                return (r.kind is not ArtifactKind.BACKBONE_MODEL
                        and self._reclaimable(r.function_id))

            # Cheap upper bound on freeable bytes before planning evictions.
            evictable = 0
            evictable_fns = set()
            for r in self.residency.gpu_residents(gid):
                if _evictable(r):
                    evictable += r.size_bytes
                    evictable_fns.add(r.function_id)
            overhead_fns = self.residency.gpus[gid].overhead_fns
            evictable += self.residency.context_overhead * len(evictable_fns & overhead_fns)
            if needed > free + evictable:
                return False
            request = offload.OffloadRequest(gid, needed, frozenset(protected))
            room = {
                c: self.residency.container_free(c)
                for c in self.cluster.containers_of(gid)
            }
            candidates = [
                v for v, r in zip(self._resident_values(gid),
                                  self.residency.gpu_residents(gid))
                if _evictable(r) or r.function_id in protected
            ]
            try:
                evictions = offload.select_evictions(
                    request, candidates, self.catalog,
                    free_bytes=free, container_free=room,
                    context_overhead_bytes=self.residency.context_overhead)
            except offload.InsufficientEvictableMemory:
                return False
            done = offload.apply_evictions(
                evictions, self.residency, now_ms=self.now,
                demotion_gbps=self.config.demotion_gbps)
            for latency, ev in done:
                self._push(self.now + latency, "EvictionComplete",
                           (ev.function_id, ev.kind.value, ev.destination))
                self._log("BatchDispatch",
                          f"evict fn={ev.function_id} kind={ev.kind.value} dest={ev.destination}")

        warm = (fn.id, cid) in self.warm if cid else False
        cold_ms, breakdown = cold_start_latency(
            fn, self.catalog, self.residency, cid, gid, self.now, warm)

        cursor = self.now + breakdown["container_init"]
        lib = fn.artifact(ArtifactKind.LIBRARY)
        if lib is not None and cid is not None and self.residency.container_resident(
                cid, fn.id, ArtifactKind.LIBRARY) is None:
            if self.residency.container_free(cid) < lib.size_bytes:
                return False  # no container room for the library
            self.residency.add_container(cid, Resident(
                fn.id, ArtifactKind.LIBRARY, lib.size_bytes,
                usable_at_ms=cursor + breakdown["library_load"]))
        cursor += breakdown["library_load"]
        term_of = {
            ArtifactKind.BACKBONE_MODEL: "backbone_load",
            ArtifactKind.ADAPTER_MODEL: "adapter_load",
            ArtifactKind.KERNEL: "kernel_compile",
        }
        for fid2, art in loads_gpu:
            term = breakdown[term_of[art.kind]]
            self.residency.add_gpu(gid, Resident(
                fid2, art.kind, art.size_bytes, usable_at_ms=cursor + term))
            cursor += term

        self.residency.reserve_kv(gid, b.id, b.size * fn.kv_cache_bytes_per_request)

        b.container_id = cid
        b.dispatch_ms = self.now
        b.kv_bytes = b.size * fn.kv_cache_bytes_per_request
        b.cold_breakdown = breakdown
        b.prefill_work_ms = batching.predict_ttft(fn, b.size)
        steps = max(self.records[rid].output_tokens for rid in b.request_ids) - 1
        b.max_decode_steps = steps

        for rid in b.request_ids:
            rec = self.records[rid]
            rec.dispatch_ms = self.now
            rec.batch_size = b.size
            rec.cold_start_breakdown = dict(breakdown)

        if cid is not None:
            self.warm[(fn.id, cid)] = self.now
        self.active_batches[fn.id] += 1
        self.last_active[fn.id] = self.now
        self.peak_batch_size = max(self.peak_batch_size, b.size)
        self._log("BatchDispatch", f"batch={b.id} fn={fn.id} gpu={gid} n={b.size} cold={cold_ms:.3f}")

        if cold_ms > 0:
            self._push(self.now + cold_ms, "PreloadComplete", ("batch", b.id))
        else:
            self._activate_prefill(b)
        return True

    def _activate_prefill(self, b: _Batch):
        rt = self.gpu_rt[b.gpu_id]
        rt.advance(self.now)
        rt.prefill_jobs[b.id] = b.prefill_work_ms
        self._ps_reschedule(b.gpu_id)

    def _ps_reschedule(self, gid: str):
        rt = self.gpu_rt[gid]
        rt.version += 1
        if not rt.prefill_jobs:
            return
        min_rem = min(rt.prefill_jobs.values())
        eta = self.now + max(0.0, min_rem) * rt.m
        self._push(eta, "PrefillComplete", (gid, rt.version))

    def _on_prefill_complete(self, payload):
        gid, version = payload
        rt = self.gpu_rt[gid]
        if version != rt.version:
            return  # superseded by a membership change
        rt.advance(self.now)
        done = sorted(bid for bid, rem in rt.prefill_jobs.items() if rem <= 1e-9)
        for bid in done:
            del rt.prefill_jobs[bid]
        for bid in done:
            b = self.batches[bid]
            self._log("PrefillComplete", f"batch={bid} fn={b.function_id}")
            for rid in b.request_ids:
                self.records[rid].first_token_ms = self.now
            if b.max_decode_steps <= 0:
                self._finish_batch(b)
            else:
                rt.decode_batches.add(bid)
                gap = self.catalog.get(b.function_id).decode_ms_per_token * rt.m
                self._push(self.now + gap, "TokenEmitted", bid)
        self._ps_reschedule(gid)

    def _on_token_emitted(self, batch_id: int):
        b = self.batches[batch_id]
        rt = self.gpu_rt[b.gpu_id]
        rt.advance(self.now)
        b.decode_step += 1
        fn = self.catalog.get(b.function_id)
        finished_now = [
            rid for rid in b.request_ids
            if self.records[rid].output_tokens - 1 == b.decode_step
        ]
        for rid in finished_now:
            self._complete_request(rid, b)
        if b.decode_step >= b.max_decode_steps:
            rt.decode_batches.discard(b.id)
            self._finish_batch(b)
            self._ps_reschedule(b.gpu_id)
        else:
            gap = fn.decode_ms_per_token * rt.m
            self._push(self.now + gap, "TokenEmitted", b.id)

    def _complete_request(self, rid: int, b: _Batch):
        rec = self.records[rid]
        rec.completion_ms = self.now
        self.outstanding -= 1
        fn = self.catalog.get(b.function_id)
        if fn.kv_cache_bytes_per_request > 0:
            self.residency.gpus[b.gpu_id].kv[b.id] -= fn.kv_cache_bytes_per_request
        self._log("RequestComplete", f"req={rid} fn={b.function_id}")

    def _finish_batch(self, b: _Batch):
        # Requests with a single output token complete at prefill.
        for rid in b.request_ids:
            if math.isnan(self.records[rid].completion_ms):
                self._complete_request(rid, b)
        b.done = True
        self.residency.release_kv(b.gpu_id, b.id)
        del self.batches[b.id]  # fully drained; no event references it again
        fn_id = b.function_id
        self.active_batches[fn_id] -= 1
        self.last_active[fn_id] = self.now
        if self.active_batches[fn_id] == 0:
            self._push(self.now + self.config.keep_alive_s * 1000.0,
                       "KeepAliveExpire", (fn_id, self.now))

    def _on_preload_complete(self, payload):
        tag = payload[0]
        if tag == "batch":
            b = self.batches[payload[1]]
            self._log("PreloadComplete", f"batch={b.id} loads done")
            self._activate_prefill(b)
        else:
            _, fid, kind_value, tier_value, instance = payload
            self._log("PreloadComplete", f"{fid}/{kind_value} at {tier_value}:{instance}")

    def _on_eviction_complete(self, payload):
        fid, kind_value, destination = payload
        self._log("EvictionComplete", f"{fid}/{kind_value} -> {destination}")

    def _on_keep_alive_expire(self, payload):
        fid, idle_since = payload
        if self.active_batches.get(fid, 0) > 0:
            return
        if self.last_active.get(fid, -math.inf) > idle_since:
            return  # reactivated since this expiry was armed
        self._release_function(fid)
        self._log("KeepAliveExpire", f"fn={fid}")

    def _release_function(self, fid: str):
        """Drop a fully idle function's on-demand residency and warm instances."""
        fn = self.catalog.get(fid)
        for gid in self.cluster.gpu_ids:
            for res in list(self.residency.gpu_residents(gid)):
                if res.function_id != fid or res.planned:
                    continue
                if res.kind is ArtifactKind.BACKBONE_MODEL and self._backbone_referenced(fid, gid):
                    continue
                self.residency.remove_gpu(gid, fid, res.kind)
        for cid in self.cluster.container_ids:
            c = self.residency.containers[cid]
            for key in sorted(c.resident, key=lambda k: (k[0], k[1].value)):
                if key[0] == fid and not c.resident[key].planned:
                    self.residency.remove_container(cid, *key)
        for key in [k for k in self.warm if k[0] == fid]:
            del self.warm[key]
        # The shared backbone this adapter used may now be orphaned.
        owner = self.catalog.backbone_owner(fn)
        if owner is not None and self.active_batches.get(owner.id, 0) == 0:
            for gid in self.cluster.gpu_ids:
                res = self.residency.gpu_resident(gid, owner.id, ArtifactKind.BACKBONE_MODEL)
                if res is not None and not res.planned and not self._backbone_referenced(owner.id, gid):
                    self.residency.remove_gpu(gid, owner.id, ArtifactKind.BACKBONE_MODEL)

    def _backbone_referenced(self, owner_id: str, gid: str) -> bool:
        """True while any adapter of ``owner_id`` still has residency or work on ``gid``."""
        for adapter in self.catalog.adapters_of(owner_id):
            if self.active_batches.get(adapter.id, 0) > 0:
                return True
            if any(k[0] == adapter.id for k in self.residency.gpus[gid].resident):
                return True
        for b in self.deferred:
            if b.gpu_id == gid and (
                b.function_id == owner_id
                or self.catalog.get(b.function_id).backbone_id == owner_id
            ):
                return True
        return False

    # -- pre-loading ----------------------------------------------------------

    def _on_replan_timer(self, _):
        if self.now == 0.0:
            rates = workload.mean_rates(self.trace)
        else:
            rates = self._current_rates()
        benefits = preload.compute_benefits(self.catalog, rates)
        plan = preload.greedy_preload(benefits, self.cluster, self.catalog)
        self.current_plan = plan
        self._apply_plan(plan)
        self._log("ReplanTimer", f"plan placements={len(plan)}")
        if (self.remaining_arrivals > 0 or self.outstanding > 0) \
                and self.now <= self._drain_deadline_ms:
            self._push(self.now + self.config.replan_period_s * 1000.0, "ReplanTimer", None)

    def _apply_plan(self, plan):
        # Re-mark which residency the plan owns.
        planned_keys = set()
        for p in plan:
            planned_keys.add((p.tier, p.instance, p.function_id, p.kind))
        for gid, g in self.residency.gpus.items():
            for key, res in g.resident.items():
                res.planned = (TierKind.GPU, gid, key[0], key[1]) in planned_keys
        for cid, c in self.residency.containers.items():
            for key, res in c.resident.items():
                res.planned = (TierKind.CONTAINER, cid, key[0], key[1]) in planned_keys

        # Load whatever the plan adds, into idle capacity only; never evict.
        for p in plan:
            fn = self.catalog.get(p.function_id)
            art = fn.artifact(p.kind)
            if p.tier is TierKind.GPU:
                if self.residency.gpu_resident(p.instance, p.function_id, p.kind) is not None:
                    continue
                extra = 0
                if p.kind is not ArtifactKind.BACKBONE_MODEL and \
                        p.function_id not in self.residency.gpus[p.instance].overhead_fns:
                    extra = self.residency.context_overhead
                if self.residency.gpu_free(p.instance) < art.size_bytes + extra:
                    continue
                src = self.residency.find_container_resident(p.function_id, p.kind, p.instance)
                load_ms = art.load_from_container_ms if src is not None else art.load_cold_ms
                self.residency.add_gpu(p.instance, Resident(
                    p.function_id, p.kind, art.size_bytes,
                    usable_at_ms=self.now + load_ms, planned=True))
            else:
                if self.residency.container_resident(p.instance, p.function_id, p.kind) is not None:
                    continue
                if self.residency.container_free(p.instance) < art.size_bytes:
                    continue
                load_ms = art.load_cold_ms
                self.residency.add_container(p.instance, Resident(
                    p.function_id, p.kind, art.size_bytes,
                    usable_at_ms=self.now + load_ms, planned=True))
            self._push(self.now + load_ms, "PreloadComplete",
                       ("plan", p.function_id, p.kind.value, p.tier.value, p.instance))

    def _on_request_complete(self, payload):  # completions are handled inline
        pass


def _snake(kind: str) -> str:
    out = []
    for ch in kind:
        if ch.isupper() and out:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


def run(config: SimConfig, cluster: ClusterSpec, functions, trace: workload.Trace) -> SimulationResult:
    """Deterministic replay of ``trace`` under the configured policies."""
    return Engine(config, cluster, functions, trace).run()
