"""Seeded random instance generators shared by the oracle test suites.

Instances are deliberately desk-scale (at most 3 functions, 2 containers,
2 GPUs, 12 candidate placements) so the exhaustive solvers stay tractable
while still exercising every precedence rule.
"""

from __future__ import annotations

import itertools
import random

from slorasim.core import (
    ArtifactKind,
    ArtifactSpec,
    ClusterSpec,
    FunctionCatalog,
    FunctionSpec,
    ArrivalStats,
)
from slorasim.offload import OffloadRequest, ResidentValue

GB = 1_000_000_000


def _artifact(rng: random.Random, kind: ArtifactKind) -> ArtifactSpec:
    cold = rng.uniform(100.0, 5000.0)
    from_container = rng.uniform(0.0, cold) if kind.is_model else 0.0
    return ArtifactSpec(
        kind=kind,
        size_bytes=rng.randint(1, 10) * GB,
        load_cold_ms=cold,
        load_from_container_ms=from_container,
    )


def _function(rng: random.Random, fid: str, artifacts, backbone_id=None) -> FunctionSpec:
    return FunctionSpec(
        id=fid,
        backbone_id=backbone_id,
        artifacts=tuple(artifacts),
        slo_ttft_ms=2500.0,
        prefill_base_ms=500.0,
        prefill_marginal_ms=100.0,
        kv_cache_bytes_per_request=0,
    )


def _candidate_cost(kind: ArtifactKind, n_gpus: int, n_containers: int) -> int:
    """Candidate placements one artifact contributes (one per legal instance)."""
    if kind.is_model:
        return n_gpus + n_containers
    if kind is ArtifactKind.KERNEL:
        return n_gpus
    return n_containers  # library


def preload_instance(seed: int, max_candidates: int = 12):
    """(catalog, cluster, arrival stats, unconstrained?) for one seeded instance."""
    rng = random.Random(seed)
    n_gpus = rng.randint(1, 2)
    n_containers = rng.randint(1, 2)

    budget = max_candidates
    functions: list[FunctionSpec] = []

    def try_add(kind, artifacts, chance=1.0):
        nonlocal budget
        cost = _candidate_cost(kind, n_gpus, n_containers)
        if budget - cost >= 0 and rng.random() < chance:
            budget -= cost
            artifacts.append(kind)
            return True
        return False

    shared = rng.random() < 0.5
    if shared:
        owner_arts: list[ArtifactKind] = []
        try_add(ArtifactKind.BACKBONE_MODEL, owner_arts)
        try_add(ArtifactKind.KERNEL, owner_arts, chance=0.5)
        owner_has_lib = try_add(ArtifactKind.LIBRARY, owner_arts, chance=0.5)
        functions.append(_function(
            rng, "owner", [_artifact(rng, k) for k in owner_arts]))
        for i in range(rng.randint(1, 2)):
            arts: list[ArtifactKind] = []
            if not try_add(ArtifactKind.ADAPTER_MODEL, arts):
                break
            try_add(ArtifactKind.KERNEL, arts, chance=0.5)
            # An adapter's runtime stack presupposes the backbone's: never
            # give an adapter a library its backbone owner lacks.
            if owner_has_lib:
                try_add(ArtifactKind.LIBRARY, arts, chance=0.5)
            functions.append(_function(
                rng, f"ad{i}", [_artifact(rng, k) for k in arts], backbone_id="owner"))
    else:
        for i in range(rng.randint(1, 3)):
            arts: list[ArtifactKind] = []
            if not try_add(ArtifactKind.BACKBONE_MODEL, arts):
                break
            try_add(ArtifactKind.KERNEL, arts, chance=0.5)
            try_add(ArtifactKind.LIBRARY, arts, chance=0.5)
            functions.append(_function(
                rng, f"f{i}", [_artifact(rng, k) for k in arts]))

    catalog = FunctionCatalog(functions)
    total_bytes = sum(a.size_bytes for f in catalog for a in f.artifacts)
    unconstrained = rng.random() < 0.3
    if unconstrained:
        gpu_cap = container_cap = lambda: total_bytes  # noqa: E731
    else:
        gpu_cap = lambda: rng.randint(max(1, total_bytes // 4), total_bytes)  # noqa: E731
        container_cap = lambda: rng.randint(max(1, total_bytes // 4), total_bytes)  # noqa: E731
    gpus = tuple((f"g{i}", gpu_cap()) for i in range(n_gpus))
    containers = tuple((f"c{i}", container_cap()) for i in range(n_containers))
    adjacency = {cid: gpus[i % n_gpus][0] for i, (cid, _) in enumerate(containers)}
    cluster = ClusterSpec(containers=containers, gpus=gpus, adjacency=adjacency)
    arrival = ArrivalStats({f.id: rng.uniform(0.1, 5.0) for f in catalog})
    return catalog, cluster, arrival, unconstrained


def offload_instance(seed: int, max_candidates: int = 12):
    """(catalog, resident values, request) for one seeded eviction instance."""
    rng = random.Random(seed)
    functions: list[FunctionSpec] = []
    residents: list[ResidentValue] = []

    def add_resident(fid, kind):
        residents.append(ResidentValue(
            fid, kind, rng.randint(1, 10) * GB, rng.uniform(0.0, 10.0)))

    n_owners = rng.randint(1, 2)
    for i in range(n_owners):
        oid = f"owner{i}"
        arts = [_artifact(rng, ArtifactKind.BACKBONE_MODEL)]
        has_kernel = rng.random() < 0.5
        if has_kernel:
            arts.append(_artifact(rng, ArtifactKind.KERNEL))
        functions.append(_function(rng, oid, arts))
        add_resident(oid, ArtifactKind.BACKBONE_MODEL)
        if has_kernel and rng.random() < 0.8:
            add_resident(oid, ArtifactKind.KERNEL)
        for j in range(rng.randint(0, 2)):
            aid = f"ad{i}{j}"
            arts = [_artifact(rng, ArtifactKind.ADAPTER_MODEL)]
            has_kernel = rng.random() < 0.5
            if has_kernel:
                arts.append(_artifact(rng, ArtifactKind.KERNEL))
            functions.append(_function(rng, aid, arts, backbone_id=oid))
            if rng.random() < 0.8:
                add_resident(aid, ArtifactKind.ADAPTER_MODEL)
                if has_kernel and rng.random() < 0.8:
                    add_resident(aid, ArtifactKind.KERNEL)
    while len(residents) > max_candidates:
        residents.pop(rng.randrange(len(residents)))

    catalog = FunctionCatalog(functions)
    total = sum(r.weight for r in residents)
    deficit = rng.randint(1, max(1, int(total * 1.1)))
    protected = frozenset(
        f.id for f in catalog if rng.random() < 0.15)
    request = OffloadRequest("g0", deficit, protected)
    return catalog, residents, request


def brute_force_min_eviction_value(catalog, residents, request):
    """Minimum total value over subsets freeing >= the deficit.

    A subset is legal when it avoids protected functions and is closed
    under the eviction dependencies (a model's kernel leaves with it; a
    backbone's resident adapters leave with it). Returns None when no
    legal subset frees enough.
    """
    pool = {(r.function_id, r.kind): r for r in residents}

    def closed(subset: frozenset) -> bool:
        for fid, kind in subset:
            if kind.is_model and (fid, ArtifactKind.KERNEL) in pool \
                    and (fid, ArtifactKind.KERNEL) not in subset:
                return False
            if kind is ArtifactKind.BACKBONE_MODEL:
                for adapter in catalog.adapters_of(fid):
                    key = (adapter.id, ArtifactKind.ADAPTER_MODEL)
                    if key in pool and key not in subset:
                        return False
        return True

    allowed = [r for r in residents if r.function_id not in request.protected]
    best = None
    for n in range(len(allowed) + 1):
        for combo in itertools.combinations(allowed, n):
            keys = frozenset((r.function_id, r.kind) for r in combo)
            if not closed(keys):
                continue
            if sum(r.weight for r in combo) < request.required_bytes:
                continue
            value = sum(r.value for r in combo)
            if best is None or value < best:
                best = value
    return best
