"""Artifact pre-loading placement: value-density greedy solver and exact oracle.

The placement problem is a precedence-constrained knapsack: an artifact may
occupy container or GPU memory only if its loading prerequisites (library
before model, backbone before adapter, model before kernel) are placed too.
The greedy solver scans candidates by non-increasing value density and
auto-inserts missing prerequisites when they fit.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    ArrivalStats,
    ArtifactKind,
    ClusterSpec,
    FunctionCatalog,
    Placement,
    PreloadPlan,
    TierKind,
    validate_plan,
)


class InstanceTooLarge(Exception):
    """Exhaustive search refused: too many candidate placements."""


@dataclass(frozen=True)
class DensityEntry:
    function_id: str
    kind: ArtifactKind
    tier: TierKind
    value: float          # ms of startup latency avoided per second
    weight: int           # bytes

    @property
    def density(self) -> float:
        return self.value / self.weight

    def sort_key(self):
        # Non-increasing density; ties: larger value, smaller weight,
        # function id, GPU before container.
        return (
            -self.density,
            -self.value,
            self.weight,
            self.function_id,
            0 if self.tier is TierKind.GPU else 1,
            self.kind.value,
        )


class BenefitTable:
    """Value/weight per (function, artifact kind, tier)."""

    def __init__(self, entries):
        self._entries = {(e.function_id, e.kind, e.tier): e for e in entries}

    def __iter__(self):
        return iter(sorted(self._entries.values(), key=DensityEntry.sort_key))

    def __len__(self):
        return len(self._entries)

    def get(self, fid: str, kind: ArtifactKind, tier: TierKind) -> DensityEntry | None:
        return self._entries.get((fid, kind, tier))

    def value_of(self, plan: PreloadPlan) -> float:
        total = 0.0
        for p in plan:
            e = self.get(p.function_id, p.kind, p.tier)
            if e is not None:
                total += e.value
        return total

    def scaled(self, factor: float) -> "BenefitTable":
        return BenefitTable(
            DensityEntry(e.function_id, e.kind, e.tier, e.value * factor, e.weight)
            for e in self
        )


def compute_benefits(functions, arrival: ArrivalStats, cluster: ClusterSpec | None = None) -> BenefitTable:
    """Benefit of each candidate placement: avoided load delay x arrival rate.

    Container tier of a model avoids (cold - from_container) ms per future
    load; GPU tier avoids the full cold load. A shared backbone aggregates
    the rates of every function mapping to it.
    """
    catalog = functions if isinstance(functions, FunctionCatalog) else FunctionCatalog(functions)
    effective_rate = {f.id: arrival.rate(f.id) for f in catalog}
    for f in catalog:
        if f.backbone_id is not None:
            effective_rate[f.backbone_id] += arrival.rate(f.id)

    entries = []
    for f in sorted(catalog, key=lambda f: f.id):
        for a in f.artifacts:
            rate = effective_rate[f.id] if a.kind is ArtifactKind.BACKBONE_MODEL else arrival.rate(f.id)
            if a.kind.is_model:
                entries.append(DensityEntry(
                    f.id, a.kind, TierKind.GPU, a.load_cold_ms * rate, a.size_bytes))
                entries.append(DensityEntry(
                    f.id, a.kind, TierKind.CONTAINER,
                    (a.load_cold_ms - a.load_from_container_ms) * rate, a.size_bytes))
            else:
                tier = a.legal_tiers[0]
                entries.append(DensityEntry(f.id, a.kind, tier, a.load_cold_ms * rate, a.size_bytes))
    return BenefitTable(entries)


class _State:
    """Mutable placement state used while building a plan."""

    def __init__(self, cluster: ClusterSpec, catalog: FunctionCatalog, base: PreloadPlan | None = None):
        self.cluster = cluster
        self.catalog = catalog
        self.placements: set[Placement] = set(base.placements) if base else set()

    def has(self, fid, kind, tier=None, instance=None):
        return any(
            p.function_id == fid and p.kind is kind
            and (tier is None or p.tier is tier)
            and (instance is None or p.instance == instance)
            for p in self.placements
        )

    def plan(self) -> PreloadPlan:
        return PreloadPlan(frozenset(self.placements))

    def instances_by_free(self, tier: TierKind, restrict=None):
        """Instance ids ordered by remaining free capacity descending, id asc."""
        plan = self.plan()
        out = []
        ids = self.cluster.container_ids if tier is TierKind.CONTAINER else self.cluster.gpu_ids
        for iid in ids:
            if restrict is not None and iid not in restrict:
                continue
            used = sum(
                self.catalog.get(p.function_id).artifact(p.kind).size_bytes
                for p in plan.on_instance(tier, iid)
            )
            cap = (self.cluster.container_capacity(iid) if tier is TierKind.CONTAINER
                   else self.cluster.gpu_capacity(iid))
            out.append((cap - used, iid))
        out.sort(key=lambda t: (-t[0], t[1]))
        return [iid for _, iid in out]


def _prerequisites(state: _State, fid: str, kind: ArtifactKind, tier: TierKind,
                   instance: str, acc: list[Placement]) -> bool:
    """Collect missing prerequisite placements into ``acc``.

    Returns False when some prerequisite cannot be expressed (missing
    artifact on a required path), leaving acc partially filled; callers
    discard acc on failure.
    """
    catalog = state.catalog
    fn = catalog.get(fid)

    def ensure(fid2, kind2, tier2, instance2) -> bool:
        if state.has(fid2, kind2, tier2, instance2) or any(
            p.function_id == fid2 and p.kind is kind2 and p.tier is tier2 and p.instance == instance2
            for p in acc
        ):
            return True
        # Already placed elsewhere: a second copy would be a duplicate.
        if state.has(fid2, kind2) or any(
            p.function_id == fid2 and p.kind is kind2 for p in acc
        ):
            return False
        acc.append(Placement(fid2, kind2, tier2, instance2))
        return _prerequisites(state, fid2, kind2, tier2, instance2, acc)

    if kind.is_model:
        lib = fn.artifact(ArtifactKind.LIBRARY)
        if tier is TierKind.CONTAINER:
            if lib is not None and not ensure(fid, ArtifactKind.LIBRARY, TierKind.CONTAINER, instance):
                return False
        else:
            if lib is not None:
                attached = state.cluster.containers_of(instance)
                if not any(
                    state.has(fid, ArtifactKind.LIBRARY, TierKind.CONTAINER, c) for c in attached
                ) and not any(
                    p.function_id == fid and p.kind is ArtifactKind.LIBRARY and p.instance in attached
                    for p in acc
                ):
                    ok = False
                    for c in state.instances_by_free(TierKind.CONTAINER, restrict=set(attached)):
                        if ensure(fid, ArtifactKind.LIBRARY, TierKind.CONTAINER, c):
                            ok = True
                            break
                    if not ok:
                        return False
        if kind is ArtifactKind.ADAPTER_MODEL and fn.is_adapter:
            owner = catalog.backbone_owner(fn)
            if tier is TierKind.GPU:
                if not ensure(owner.id, ArtifactKind.BACKBONE_MODEL, TierKind.GPU, instance):
                    return False
            else:
                group_gpu = state.cluster.gpu_of(instance)
                group = state.cluster.containers_of(group_gpu)
                if not any(
                    state.has(owner.id, ArtifactKind.BACKBONE_MODEL, TierKind.CONTAINER, c)
                    for c in group
                ) and not any(
                    p.function_id == owner.id and p.kind is ArtifactKind.BACKBONE_MODEL
                    and p.tier is TierKind.CONTAINER and p.instance in group
                    for p in acc
                ):
                    ok = False
                    for c in state.instances_by_free(TierKind.CONTAINER, restrict=set(group)):
                        if ensure(owner.id, ArtifactKind.BACKBONE_MODEL, TierKind.CONTAINER, c):
                            ok = True
                            break
                    if not ok:
                        return False
    elif kind is ArtifactKind.KERNEL:
        model_kinds = [a.kind for a in fn.model_artifacts]
        if fn.is_adapter:
            model_kinds = [ArtifactKind.ADAPTER_MODEL]
        if not model_kinds:
            return False
        for mk in model_kinds:
            if not ensure(fid, mk, TierKind.GPU, instance):
                return False
    return True


def greedy_preload(benefits: BenefitTable, cluster: ClusterSpec, functions) -> PreloadPlan:
    """Place candidates in non-increasing density order, first instance that fits.

    Missing prerequisites are auto-inserted when (and only when) they fit;
    otherwise the candidate is skipped. The returned plan always validates
    clean. Deterministic for a fixed input order.
    """
    catalog = functions if isinstance(functions, FunctionCatalog) else FunctionCatalog(functions)
    state = _State(cluster, catalog)
    for entry in benefits:
        if entry.value <= 0.0:
            continue  # no demand, nothing to gain by pre-loading
        if state.has(entry.function_id, entry.kind):
            continue
        placed = False
        for instance in state.instances_by_free(entry.tier):
            candidate = Placement(entry.function_id, entry.kind, entry.tier, instance)
            extra: list[Placement] = [candidate]
            if not _prerequisites(state, entry.function_id, entry.kind, entry.tier, instance, extra):
                continue
            trial = state.plan().with_placements(extra)
            if not validate_plan(trial, cluster, catalog):
                state.placements.update(extra)
                placed = True
                break
        if not placed:
            continue
    return state.plan()


def _all_candidates(benefits: BenefitTable, cluster: ClusterSpec) -> list[Placement]:
    out = []
    for e in benefits:
        pool = cluster.gpu_ids if e.tier is TierKind.GPU else cluster.container_ids
        for iid in sorted(pool):
            out.append(Placement(e.function_id, e.kind, e.tier, iid))
    return out


def exact_preload(benefits: BenefitTable, cluster: ClusterSpec, functions,
                  limit: int = 20) -> PreloadPlan:
    """Optimal plan by exhaustive search with capacity pruning (desk-scale oracle).

    Ties broken by fewer placements, then lexical placement order. Raises
    InstanceTooLarge when candidate placements exceed ``limit``.
    """
    catalog = functions if isinstance(functions, FunctionCatalog) else FunctionCatalog(functions)
    candidates = _all_candidates(benefits, cluster)
    if len(candidates) > limit:
        raise InstanceTooLarge(f"{len(candidates)} candidate placements > limit {limit}")

    values = {}
    for p in candidates:
        e = benefits.get(p.function_id, p.kind, p.tier)
        values[p] = e.value if e else 0.0

    container_cap = {c: cluster.container_capacity(c) for c in cluster.container_ids}
    gpu_cap = {g: cluster.gpu_capacity(g) for g in cluster.gpu_ids}

    best = {"plan": PreloadPlan(), "value": 0.0, "key": (0, ())}

    def weight(p: Placement) -> int:
        return catalog.get(p.function_id).artifact(p.kind).size_bytes

    def consider(chosen: list[Placement], value: float):
        plan = PreloadPlan(frozenset(chosen))
        if validate_plan(plan, cluster, catalog):
            return
        key = (len(chosen), tuple(sorted(p.sort_key() for p in chosen)))
        if value > best["value"] + 1e-12 or (
            abs(value - best["value"]) <= 1e-12 and key < best["key"]
        ):
            best["plan"], best["value"], best["key"] = plan, value, key

    n = len(candidates)
    suffix_value = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_value[i] = suffix_value[i + 1] + values[candidates[i]]

    def dfs(i: int, chosen: list[Placement], value: float,
            cfree: dict, gfree: dict, taken_kinds: set):
        if value + suffix_value[i] < best["value"] - 1e-12:
            return
        if i == n:
            consider(chosen, value)
            return
        p = candidates[i]
        # Include p when capacity allows and the (function, artifact) is unused.
        if (p.function_id, p.kind) not in taken_kinds:
            w = weight(p)
            free = cfree if p.tier is TierKind.CONTAINER else gfree
            if free[p.instance] >= w:
                free[p.instance] -= w
                chosen.append(p)
                taken_kinds.add((p.function_id, p.kind))
                dfs(i + 1, chosen, value + values[p], cfree, gfree, taken_kinds)
                taken_kinds.discard((p.function_id, p.kind))
                chosen.pop()
                free[p.instance] += w
        dfs(i + 1, chosen, value, cfree, gfree, taken_kinds)

    dfs(0, [], 0.0, dict(container_cap), dict(gpu_cap), set())
    return best["plan"]
