"""Reactive GPU offloading: evict the least-valuable resident artifacts to
make room for incoming batches.

Candidates are ranked by value density ascending; a backbone becomes
evictable only once every adapter and kernel depending on it on that GPU is
evicted too (their bytes count toward the freed total). Models are demoted
to an attached container when it has room, everything else is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .core import MODEL_KINDS, ArtifactKind, FunctionCatalog, TierKind
from .ledger import Resident, ResidencyLedger


class InsufficientEvictableMemory(Exception):
    """Not enough unprotected resident bytes to satisfy the request."""


class StaleStateError(Exception):
    """Residency changed between selection and application."""


@dataclass(frozen=True)
class OffloadRequest:
    gpu_id: str
    required_bytes: int
    protected: frozenset = frozenset()  # function ids currently invoked

    def __post_init__(self):
        object.__setattr__(self, "protected", frozenset(self.protected))
        if self.required_bytes <= 0:
            raise ValueError("required_bytes must be > 0")


@dataclass(frozen=True)
class ResidentValue:
    """A GPU-resident artifact with its current benefit value."""

    function_id: str
    kind: ArtifactKind
    weight: int
    value: float

    @property
    def density(self) -> float:
        return self.value / self.weight

    def evict_key(self):
        # Ascending density; ties: smaller value, larger weight, id, kind.
        return (self.density, self.value, -self.weight, self.function_id, self.kind.value)


class Eviction(NamedTuple):
    function_id: str
    kind: ArtifactKind
    gpu_id: str
    size_bytes: int
    destination: str  # "discard" or a container id


_KERNEL_V = ArtifactKind.KERNEL.value
_ADAPTER_V = ArtifactKind.ADAPTER_MODEL.value
_BACKBONE_V = ArtifactKind.BACKBONE_MODEL.value


def _dependents(entry: ResidentValue, kv: str, pool: dict, catalog: FunctionCatalog) -> list:
    """Resident artifacts that must leave the GPU before the model ``entry``
    can, as (entry, kind value) pairs. ``pool`` is keyed on
    (function id, kind value)."""
    out = []
    k = pool.get((entry.function_id, _KERNEL_V))
    if k is not None:
        out.append((k, _KERNEL_V))
    if kv == _BACKBONE_V:
        for adapter in catalog.adapters_of(entry.function_id):
            a = pool.get((adapter.id, _ADAPTER_V))
            if a is not None:
                out.append((a, _ADAPTER_V))
                ak = pool.get((adapter.id, _KERNEL_V))
                if ak is not None:
                    out.append((ak, _KERNEL_V))
    return out


def select_evictions(request: OffloadRequest, resident: list, catalog: FunctionCatalog,
                     free_bytes: int = 0, container_free: dict | None = None,
                     context_overhead_bytes: int = 0) -> list[Eviction]:
    """Pick evictions freeing at least the deficit with minimal value lost.

    ``resident`` is the GPU-tier residency of ``request.gpu_id`` as
    ResidentValue entries (values from the current arrival-rate snapshot).
    ``container_free`` maps attached container ids to their free bytes and
    bounds demotions. Fully evicted functions additionally free their
    context overhead.
    """
    deficit = request.required_bytes - free_bytes
    if deficit <= 0:
        return []

    # Hot path: enum hashing is Python-level and dominates at 1000 candidates,
    # so all bookkeeping below keys on (function id, kind value) string pairs
    # resolved once per entry.
    # Hot path: enum hashing and property lookups are Python-level and
    # dominate at 1000 candidates, so the bookkeeping below works on
    # (function id, kind value-string) pairs resolved once per entry.
    room = dict(container_free or {})
    backbone_value = ArtifactKind.BACKBONE_MODEL.value
    model_values = frozenset(k.value for k in MODEL_KINDS)
    # Eviction-priority order; the trailing (function id, kind value) pair is
    # unique, so the non-orderable entry object is never compared.
    items = [
        (r.value / r.weight, r.value, -r.weight, r.function_id, r.kind.value, r)
        for r in resident
    ]
    items.sort()

    # Only needed to detect a function's last process-holding artifact.
    kinds_left: dict[str, set] = {}
    if context_overhead_bytes:
        for _, _, _, fid, kv, _ in items:
            kinds_left.setdefault(fid, set()).add(kv)

    selected: list[tuple[ResidentValue, str]] = []
    chosen = set()
    freed = 0
    protected = request.protected
    pool = None  # built lazily; only model evictions need dependency lookups

    def freed_with_overhead(entry, kv) -> int:
        """Bytes released by evicting ``entry``, incl. context overhead when
        it is the function's last process-holding artifact on this GPU."""
        if not context_overhead_bytes:
            return entry.weight
        kinds_now = kinds_left[entry.function_id]
        kinds_after = kinds_now - {kv}
        before = bool(kinds_now) and kinds_now != {backbone_value}
        after = bool(kinds_after) and kinds_after != {backbone_value}
        extra = context_overhead_bytes if before and not after else 0
        return entry.weight + extra

    def take(entry: ResidentValue, kv: str):
        nonlocal freed
        key = (entry.function_id, kv)
        if key in chosen:
            return
        chosen.add(key)
        selected.append((entry, kv))
        freed += freed_with_overhead(entry, kv)
        if context_overhead_bytes:
            kinds_left[entry.function_id].discard(kv)

    for _, _, _, fid, kv, entry in items:
        if freed >= deficit:
            break
        key = (fid, kv)
        if key in chosen:
            continue
        if fid in protected:
            continue
        if kv in model_values:
            if pool is None:
                pool = {(t[3], t[4]): t[5] for t in items}
            deps = _dependents(entry, kv, pool, catalog)
            if any(d.function_id in protected for d, _ in deps):
                continue
            # Dependents leave first; their bytes count toward the freed total.
            for d, dkv in deps:
                take(d, dkv)
        # Inlined fast path of take(): the entry itself is never a duplicate
        # here (checked above) unless a dependent just claimed it.
        if key not in chosen:
            chosen.add(key)
            selected.append((entry, kv))
            freed += freed_with_overhead(entry, kv)
            if context_overhead_bytes:
                kinds_left[fid].discard(kv)

    if freed < deficit:
        raise InsufficientEvictableMemory(
            f"gpu {request.gpu_id}: can free {freed} of {deficit} bytes"
        )

    evictions = []
    for entry, kv in selected:
        destination = "discard"
        if kv in model_values and room:
            for cid in sorted(room, key=lambda c: (-room[c], c)):
                if room[cid] >= entry.weight:
                    destination = cid
                    room[cid] -= entry.weight
                    break
        evictions.append(Eviction(
            entry.function_id, entry.kind, request.gpu_id, entry.weight, destination))
    return evictions


def apply_evictions(evictions: list[Eviction], residency: ResidencyLedger,
                    now_ms: float = 0.0, demotion_gbps: float = 1.0) -> list[tuple[float, Eviction]]:
    """Materialize evictions in the ledger.

    GPU bytes are released immediately (transfer-out is asynchronous);
    demoted models occupy container memory at once and become usable there
    after the transfer. Returns (completion latency ms, eviction) pairs for
    event scheduling. Raises StaleStateError when the residency moved on
    since selection.
    """
    for ev in evictions:
        if residency.gpu_resident(ev.gpu_id, ev.function_id, ev.kind) is None:
            raise StaleStateError(f"{ev.function_id}/{ev.kind.value} no longer on gpu {ev.gpu_id}")

    completed = []
    for ev in evictions:
        resident = residency.remove_gpu(ev.gpu_id, ev.function_id, ev.kind)
        latency = 0.0
        if ev.destination != "discard" and residency.container_resident(
                ev.destination, ev.function_id, ev.kind) is None:
            latency = resident.size_bytes / (demotion_gbps * 1e9) * 1e3
            residency.add_container(ev.destination, Resident(
                ev.function_id, ev.kind, resident.size_bytes,
                usable_at_ms=now_ms + latency, planned=resident.planned))
        completed.append((latency, ev))
    return completed
