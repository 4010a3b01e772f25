"""GPU/container memory accounting: artifact residency, CUDA-context
overhead, and KV-cache reservations.

The ledger enforces conservation at every mutation: resident bytes +
context overheads + KV reservations never exceed capacity, and a given
backbone's tensor block exists at most once per GPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ArtifactKind, ClusterSpec, TierKind, UnknownIdError


class LedgerError(Exception):
    pass


@dataclass
class Resident:
    function_id: str
    kind: ArtifactKind
    size_bytes: int
    usable_at_ms: float = 0.0   # still loading until this simulated time
    planned: bool = False       # placed by the pre-load plan (vs on demand)

    @property
    def key(self):
        return (self.function_id, self.kind)


@dataclass
class _Gpu:
    capacity: int
    resident: dict = field(default_factory=dict)   # (fid, kind) -> Resident
    kv: dict = field(default_factory=dict)         # batch id -> bytes
    overhead_fns: set = field(default_factory=set)


@dataclass
class _Container:
    capacity: int
    resident: dict = field(default_factory=dict)


class ResidencyLedger:
    def __init__(self, cluster: ClusterSpec):
        self.cluster = cluster
        self.context_overhead = cluster.context_overhead_bytes
        self.gpus = {gid: _Gpu(cap) for gid, cap in cluster.gpus}
        self.containers = {cid: _Container(cap) for cid, cap in cluster.containers}

    # -- queries ------------------------------------------------------------

    def _gpu(self, gid: str) -> _Gpu:
        try:
            return self.gpus[gid]
        except KeyError:
            raise UnknownIdError(f"unknown gpu {gid!r}") from None

    def _container(self, cid: str) -> _Container:
        try:
            return self.containers[cid]
        except KeyError:
            raise UnknownIdError(f"unknown container {cid!r}") from None

    def gpu_used(self, gid: str) -> int:
        g = self._gpu(gid)
        return (
            sum(r.size_bytes for r in g.resident.values())
            + self.context_overhead * len(g.overhead_fns)
            + sum(g.kv.values())
        )

    def gpu_free(self, gid: str) -> int:
        return self._gpu(gid).capacity - self.gpu_used(gid)

    def container_used(self, cid: str) -> int:
        return sum(r.size_bytes for r in self._container(cid).resident.values())

    def container_free(self, cid: str) -> int:
        c = self._container(cid)
        return c.capacity - self.container_used(cid)

    def gpu_resident(self, gid: str, fid: str, kind: ArtifactKind) -> Resident | None:
        return self._gpu(gid).resident.get((fid, kind))

    def container_resident(self, cid: str, fid: str, kind: ArtifactKind) -> Resident | None:
        return self._container(cid).resident.get((fid, kind))

    def find_container_resident(self, fid: str, kind: ArtifactKind, gpu_id: str | None = None):
        """(container id, Resident) holding the artifact, optionally restricted
        to containers attached to ``gpu_id``."""
        cids = self.cluster.containers_of(gpu_id) if gpu_id else sorted(self.containers)
        for cid in cids:
            r = self.containers[cid].resident.get((fid, kind))
            if r is not None:
                return cid, r
        return None

    def gpu_residents(self, gid: str) -> list[Resident]:
        g = self._gpu(gid)
        return [g.resident[k] for k in sorted(g.resident, key=lambda k: (k[0], k[1].value))]

    # -- mutations ----------------------------------------------------------

    def _refresh_overhead(self, gid: str):
        """A function holds a CUDA context on a GPU iff it has resident
        artifacts there beyond a bare shared backbone tensor block."""
        g = self.gpus[gid]
        by_fn: dict[str, set] = {}
        for fid, kind in g.resident:
            by_fn.setdefault(fid, set()).add(kind)
        g.overhead_fns = {
            fid for fid, kinds in by_fn.items()
            if kinds != {ArtifactKind.BACKBONE_MODEL}
        }

    def _check(self, gid=None, cid=None):
        if gid is not None and self.gpu_free(gid) < 0:
            raise LedgerError(f"gpu {gid}: over capacity by {-self.gpu_free(gid)} bytes")
        if cid is not None and self.container_free(cid) < 0:
            raise LedgerError(f"container {cid}: over capacity by {-self.container_free(cid)} bytes")

    def add_gpu(self, gid: str, resident: Resident) -> None:
        g = self._gpu(gid)
        if resident.key in g.resident:
            raise LedgerError(f"gpu {gid}: {resident.key} already resident")
        if resident.kind is ArtifactKind.BACKBONE_MODEL:
            # One tensor block per backbone per GPU; adapters reference it.
            for fid, kind in g.resident:
                if kind is ArtifactKind.BACKBONE_MODEL and fid == resident.function_id:
                    raise LedgerError(f"gpu {gid}: backbone {fid} already resident")
        g.resident[resident.key] = resident
        self._refresh_overhead(gid)
        self._check(gid=gid)

    def remove_gpu(self, gid: str, fid: str, kind: ArtifactKind) -> Resident:
        g = self._gpu(gid)
        try:
            r = g.resident.pop((fid, kind))
        except KeyError:
            raise LedgerError(f"gpu {gid}: {(fid, kind)} not resident") from None
        self._refresh_overhead(gid)
        return r

    def add_container(self, cid: str, resident: Resident) -> None:
        c = self._container(cid)
        if resident.key in c.resident:
            raise LedgerError(f"container {cid}: {resident.key} already resident")
        c.resident[resident.key] = resident
        self._check(cid=cid)

    def remove_container(self, cid: str, fid: str, kind: ArtifactKind) -> Resident:
        c = self._container(cid)
        try:
            return c.resident.pop((fid, kind))
        except KeyError:
            raise LedgerError(f"container {cid}: {(fid, kind)} not resident") from None

    def reserve_kv(self, gid: str, batch_id, nbytes: int) -> None:
        g = self._gpu(gid)
        if batch_id in g.kv:
            raise LedgerError(f"gpu {gid}: batch {batch_id} already holds KV")
        g.kv[batch_id] = nbytes
        self._check(gid=gid)

    def release_kv(self, gid: str, batch_id) -> int:
        g = self._gpu(gid)
        try:
            return g.kv.pop(batch_id)
        except KeyError:
            raise LedgerError(f"gpu {gid}: no KV for batch {batch_id}") from None

    def assert_conserved(self) -> None:
        for gid in self.gpus:
            if not 0 <= self.gpu_used(gid) <= self.gpus[gid].capacity:
                raise LedgerError(f"gpu {gid}: conservation violated")
        for cid in self.containers:
            if not 0 <= self.container_used(cid) <= self.containers[cid].capacity:
                raise LedgerError(f"container {cid}: conservation violated")
