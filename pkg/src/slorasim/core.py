"""Domain types shared by all policies and the simulation engine.

Artifacts, functions, clusters, and placement plans are immutable value
objects; ``validate_plan`` is the single source of truth for placement
feasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Raised when a config file is missing keys or violates invariants."""


class UnknownIdError(Exception):
    """Raised when a placement references a missing function/container/GPU."""


class ArtifactKind(Enum):
    LIBRARY = "library"
    BACKBONE_MODEL = "backbone_model"
    ADAPTER_MODEL = "adapter_model"
    KERNEL = "kernel"

    @property
    def is_model(self) -> bool:
        return self in (ArtifactKind.BACKBONE_MODEL, ArtifactKind.ADAPTER_MODEL)


MODEL_KINDS = (ArtifactKind.BACKBONE_MODEL, ArtifactKind.ADAPTER_MODEL)

# Kind aliases accepted in config files.
_KIND_ALIASES = {
    "library": ArtifactKind.LIBRARY,
    "backbone": ArtifactKind.BACKBONE_MODEL,
    "backbone_model": ArtifactKind.BACKBONE_MODEL,
    "backbonemodel": ArtifactKind.BACKBONE_MODEL,
    "adapter": ArtifactKind.ADAPTER_MODEL,
    "adapter_model": ArtifactKind.ADAPTER_MODEL,
    "adaptermodel": ArtifactKind.ADAPTER_MODEL,
    "kernel": ArtifactKind.KERNEL,
}


class TierKind(Enum):
    CONTAINER = "container"
    GPU = "gpu"


@dataclass(frozen=True)
class ArtifactSpec:
    kind: ArtifactKind
    size_bytes: int
    load_cold_ms: float
    load_from_container_ms: float = 0.0

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ConfigError(f"artifact size_bytes must be > 0, got {self.size_bytes}")
        if self.load_from_container_ms < 0 or self.load_cold_ms < self.load_from_container_ms:
            raise ConfigError(
                "need load_cold_ms >= load_from_container_ms >= 0, got "
                f"{self.load_cold_ms} / {self.load_from_container_ms}"
            )

    @property
    def legal_tiers(self) -> tuple[TierKind, ...]:
        if self.kind is ArtifactKind.LIBRARY:
            return (TierKind.CONTAINER,)
        if self.kind is ArtifactKind.KERNEL:
            return (TierKind.GPU,)
        return (TierKind.GPU, TierKind.CONTAINER)


@dataclass(frozen=True)
class FunctionSpec:
    id: str
    artifacts: tuple[ArtifactSpec, ...]
    slo_ttft_ms: float
    prefill_base_ms: float
    prefill_marginal_ms: float = 0.0
    decode_ms_per_token: float = 0.0
    kv_cache_bytes_per_request: int = 0
    container_init_ms: float = 0.0
    backbone_id: str | None = None

    def __post_init__(self):
        if isinstance(self.artifacts, list):
            object.__setattr__(self, "artifacts", tuple(self.artifacts))
        if self.prefill_base_ms <= 0:
            raise ConfigError(f"{self.id}: prefill_base_ms must be > 0")
        if self.prefill_marginal_ms < 0:
            raise ConfigError(f"{self.id}: prefill_marginal_ms must be >= 0")
        if self.slo_ttft_ms <= self.prefill_base_ms:
            raise ConfigError(f"{self.id}: slo_ttft_ms must exceed prefill_base_ms")
        n_adapter = sum(1 for a in self.artifacts if a.kind is ArtifactKind.ADAPTER_MODEL)
        n_backbone = sum(1 for a in self.artifacts if a.kind is ArtifactKind.BACKBONE_MODEL)
        if self.backbone_id is not None:
            if n_adapter != 1:
                raise ConfigError(f"{self.id}: adapter function needs exactly one adapter_model artifact")
            if n_backbone != 0:
                raise ConfigError(f"{self.id}: adapter function must not own a backbone_model artifact")
        else:
            if n_backbone > 1:
                raise ConfigError(f"{self.id}: at most one backbone_model artifact")

    @property
    def is_adapter(self) -> bool:
        return self.backbone_id is not None

    def artifact(self, kind: ArtifactKind) -> ArtifactSpec | None:
        for a in self.artifacts:
            if a.kind is kind:
                return a
        return None

    @property
    def model_artifacts(self) -> tuple[ArtifactSpec, ...]:
        return tuple(a for a in self.artifacts if a.kind.is_model)


class FunctionCatalog:
    """Indexed collection of FunctionSpec with backbone resolution."""

    def __init__(self, functions):
        self.functions = {f.id: f for f in functions}
        if len(self.functions) != len(list(functions)):
            raise ConfigError("duplicate function ids")
        self._adapters: dict[str, list] = {}
        for f in self.functions.values():
            if f.backbone_id is not None:
                owner = self.functions.get(f.backbone_id)
                if owner is None:
                    raise ConfigError(f"{f.id}: unknown backbone {f.backbone_id!r}")
                if owner.artifact(ArtifactKind.BACKBONE_MODEL) is None:
                    raise ConfigError(f"{f.backbone_id}: referenced backbone owns no backbone_model")
                self._adapters.setdefault(f.backbone_id, []).append(f)

    def __iter__(self):
        return iter(self.functions.values())

    def __len__(self):
        return len(self.functions)

    def __contains__(self, fid):
        return fid in self.functions

    def get(self, fid: str) -> FunctionSpec:
        try:
            return self.functions[fid]
        except KeyError:
            raise UnknownIdError(f"unknown function {fid!r}") from None

    def backbone_owner(self, fn: FunctionSpec) -> FunctionSpec | None:
        """The function owning the backbone tensors ``fn`` shares, if any."""
        if fn.backbone_id is None:
            return None
        return self.get(fn.backbone_id)

    def adapters_of(self, backbone_fid: str) -> list[FunctionSpec]:
        return list(self._adapters.get(backbone_fid, ()))


@dataclass(frozen=True)
class ClusterSpec:
    containers: tuple[tuple[str, int], ...]  # (id, mem_capacity_bytes)
    gpus: tuple[tuple[str, int], ...]
    adjacency: dict  # container id -> gpu id (exactly one GPU per container)
    context_overhead_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "containers", tuple(tuple(c) for c in self.containers))
        object.__setattr__(self, "gpus", tuple(tuple(g) for g in self.gpus))
        gpu_ids = {g for g, _ in self.gpus}
        for cid, cap in self.containers:
            if cap <= 0:
                raise ConfigError(f"container {cid}: capacity must be > 0")
            if cid not in self.adjacency:
                raise ConfigError(f"container {cid}: no attached GPU")
            if self.adjacency[cid] not in gpu_ids:
                raise ConfigError(f"container {cid}: attached GPU {self.adjacency[cid]!r} unknown")
        for gid, cap in self.gpus:
            if cap <= 0:
                raise ConfigError(f"gpu {gid}: capacity must be > 0")

    @property
    def container_ids(self) -> list[str]:
        return [c for c, _ in self.containers]

    @property
    def gpu_ids(self) -> list[str]:
        return [g for g, _ in self.gpus]

    def container_capacity(self, cid: str) -> int:
        for c, cap in self.containers:
            if c == cid:
                return cap
        raise UnknownIdError(f"unknown container {cid!r}")

    def gpu_capacity(self, gid: str) -> int:
        for g, cap in self.gpus:
            if g == gid:
                return cap
        raise UnknownIdError(f"unknown gpu {gid!r}")

    def gpu_of(self, cid: str) -> str:
        try:
            return self.adjacency[cid]
        except KeyError:
            raise UnknownIdError(f"unknown container {cid!r}") from None

    def containers_of(self, gid: str) -> list[str]:
        return [c for c, _ in self.containers if self.adjacency[c] == gid]


@dataclass(frozen=True)
class Placement:
    function_id: str
    kind: ArtifactKind
    tier: TierKind
    instance: str

    def __post_init__(self):
        if self.kind is ArtifactKind.LIBRARY and self.tier is not TierKind.CONTAINER:
            raise ConfigError("library placements are container-tier only")
        if self.kind is ArtifactKind.KERNEL and self.tier is not TierKind.GPU:
            raise ConfigError("kernel placements are GPU-tier only")

    def sort_key(self):
        return (self.function_id, self.kind.value, self.tier.value, self.instance)


@dataclass(frozen=True)
class PreloadPlan:
    placements: frozenset[Placement] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "placements", frozenset(self.placements))

    def __iter__(self):
        return iter(sorted(self.placements, key=Placement.sort_key))

    def __len__(self):
        return len(self.placements)

    def of_function(self, fid: str, kind: ArtifactKind | None = None) -> list[Placement]:
        return [
            p for p in self
            if p.function_id == fid and (kind is None or p.kind is kind)
        ]

    def on_instance(self, tier: TierKind, instance: str) -> list[Placement]:
        return [p for p in self if p.tier is tier and p.instance == instance]

    def with_placements(self, extra) -> "PreloadPlan":
        return PreloadPlan(self.placements | set(extra))


@dataclass(frozen=True)
class ArrivalStats:
    """Per-function request arrival rates (requests/second)."""

    rates: dict = field(default_factory=dict)

    def rate(self, fid: str) -> float:
        return max(0.0, self.rates.get(fid, 0.0))


class ViolationCode(Enum):
    CAPACITY_CONTAINER = "CapacityContainer"
    CAPACITY_GPU = "CapacityGpu"
    DUPLICATE_PLACEMENT = "DuplicatePlacement"
    LIBRARY_PRECEDENCE = "LibraryPrecedence"
    CONTAINER_GPU_DEPENDENCY = "ContainerGpuDependency"
    MODEL_KERNEL_DEPENDENCY = "ModelKernelDependency"
    BACKBONE_PRESENCE = "BackbonePresence"
    CONTAINER_GROUP_COHERENCE = "ContainerGroupCoherence"
    GPU_CONSISTENCY = "GpuConsistency"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    message: str
    function_id: str | None = None
    instance: str | None = None


def process_functions_on_gpu(plan_or_resident, gid: str):
    """Functions charged a CUDA-context overhead on ``gid``.

    The shared backbone tensor block is plain memory exposed over IPC, not a
    process, so a function whose only GPU residency is its backbone_model
    does not hold a context of its own.
    """
    by_fn = {}
    for item in plan_or_resident:
        fid, kind, tier, inst = item
        if tier is TierKind.GPU and inst == gid:
            by_fn.setdefault(fid, set()).add(kind)
    return {
        fid for fid, kinds in by_fn.items()
        if kinds != {ArtifactKind.BACKBONE_MODEL}
    }


def validate_plan(plan: PreloadPlan, cluster: ClusterSpec, functions) -> list[Violation]:
    """Check every placement constraint; returns all violations (never fail-fast).

    Empty list means the plan is feasible. Unknown ids raise UnknownIdError.
    """
    catalog = functions if isinstance(functions, FunctionCatalog) else FunctionCatalog(functions)
    container_ids = set(cluster.container_ids)
    gpu_ids = set(cluster.gpu_ids)
    violations: list[Violation] = []

    for p in plan:
        fn = catalog.get(p.function_id)
        if fn.artifact(p.kind) is None:
            raise UnknownIdError(f"{p.function_id} has no {p.kind.value} artifact")
        pool = container_ids if p.tier is TierKind.CONTAINER else gpu_ids
        if p.instance not in pool:
            raise UnknownIdError(f"unknown {p.tier.value} {p.instance!r}")

    # Duplicate placements: each (function, artifact) at most once.
    seen: dict = {}
    for p in plan:
        seen.setdefault((p.function_id, p.kind), []).append(p)
    for (fid, kind), ps in sorted(seen.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        if len(ps) > 1:
            violations.append(Violation(
                ViolationCode.DUPLICATE_PLACEMENT,
                f"{fid}/{kind.value} placed {len(ps)} times",
                function_id=fid,
            ))

    # Capacity, container tier.
    for cid in cluster.container_ids:
        used = sum(
            catalog.get(p.function_id).artifact(p.kind).size_bytes
            for p in plan.on_instance(TierKind.CONTAINER, cid)
        )
        cap = cluster.container_capacity(cid)
        if used > cap:
            violations.append(Violation(
                ViolationCode.CAPACITY_CONTAINER,
                f"container {cid}: {used} > {cap} bytes",
                instance=cid,
            ))

    # Capacity, GPU tier (context overhead charged once per resident process).
    plan_items = [(p.function_id, p.kind, p.tier, p.instance) for p in plan]
    for gid in cluster.gpu_ids:
        used = sum(
            catalog.get(p.function_id).artifact(p.kind).size_bytes
            for p in plan.on_instance(TierKind.GPU, gid)
        )
        used += cluster.context_overhead_bytes * len(process_functions_on_gpu(plan_items, gid))
        cap = cluster.gpu_capacity(gid)
        if used > cap:
            violations.append(Violation(
                ViolationCode.CAPACITY_GPU,
                f"gpu {gid}: {used} > {cap} bytes",
                instance=gid,
            ))

    def placed(fid, kind, tier=None, instance=None):
        return any(
            p.kind is kind and (tier is None or p.tier is tier)
            and (instance is None or p.instance == instance)
            for p in plan.of_function(fid)
        )

    for fn in sorted(catalog, key=lambda f: f.id):
        own = plan.of_function(fn.id)
        has_library_artifact = fn.artifact(ArtifactKind.LIBRARY) is not None
        for p in own:
            if p.kind.is_model and p.tier is TierKind.CONTAINER and has_library_artifact:
                if not placed(fn.id, ArtifactKind.LIBRARY, TierKind.CONTAINER, p.instance):
                    violations.append(Violation(
                        ViolationCode.LIBRARY_PRECEDENCE,
                        f"{fn.id}: model in container {p.instance} without its library",
                        function_id=fn.id, instance=p.instance,
                    ))
            if p.kind.is_model and p.tier is TierKind.GPU and has_library_artifact:
                attached = set(cluster.containers_of(p.instance))
                if not any(placed(fn.id, ArtifactKind.LIBRARY, TierKind.CONTAINER, c) for c in attached):
                    violations.append(Violation(
                        ViolationCode.CONTAINER_GPU_DEPENDENCY,
                        f"{fn.id}: model on gpu {p.instance} without library in an attached container",
                        function_id=fn.id, instance=p.instance,
                    ))
            if p.kind is ArtifactKind.KERNEL:
                model_kinds = [a.kind for a in fn.model_artifacts]
                if fn.is_adapter:
                    model_kinds = [ArtifactKind.ADAPTER_MODEL]
                ok = model_kinds and all(
                    placed(fn.id, mk, TierKind.GPU, p.instance) for mk in model_kinds
                )
                if not ok:
                    violations.append(Violation(
                        ViolationCode.MODEL_KERNEL_DEPENDENCY,
                        f"{fn.id}: kernel on gpu {p.instance} without its model",
                        function_id=fn.id, instance=p.instance,
                    ))

        if fn.is_adapter:
            owner = catalog.backbone_owner(fn)
            owner_placements = plan.of_function(owner.id)
            # Backbone presence: adapter library + GPU-model placements must not
            # outnumber backbone library/model placements.
            lhs = sum(1 for p in own if p.kind is ArtifactKind.LIBRARY)
            lhs += sum(1 for p in own if p.kind is ArtifactKind.ADAPTER_MODEL and p.tier is TierKind.GPU)
            rhs = sum(
                1 for p in owner_placements
                if p.kind in (ArtifactKind.LIBRARY, ArtifactKind.BACKBONE_MODEL)
            )
            if lhs > rhs:
                violations.append(Violation(
                    ViolationCode.BACKBONE_PRESENCE,
                    f"{fn.id}: placements require backbone {owner.id} loaded first",
                    function_id=fn.id,
                ))
            for p in own:
                if p.kind is not ArtifactKind.ADAPTER_MODEL:
                    continue
                if p.tier is TierKind.CONTAINER:
                    group_gpu = cluster.gpu_of(p.instance)
                    group = set(cluster.containers_of(group_gpu))
                    if not any(
                        placed(owner.id, ArtifactKind.BACKBONE_MODEL, TierKind.CONTAINER, c)
                        for c in group
                    ):
                        violations.append(Violation(
                            ViolationCode.CONTAINER_GROUP_COHERENCE,
                            f"{fn.id}: adapter in container {p.instance} but backbone absent from its container group",
                            function_id=fn.id, instance=p.instance,
                        ))
                else:
                    if not placed(owner.id, ArtifactKind.BACKBONE_MODEL, TierKind.GPU, p.instance):
                        violations.append(Violation(
                            ViolationCode.GPU_CONSISTENCY,
                            f"{fn.id}: adapter on gpu {p.instance} but backbone {owner.id} not on that gpu",
                            function_id=fn.id, instance=p.instance,
                        ))

    return violations


# ---------------------------------------------------------------------------
# Config file loading


def _load_doc(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return doc


def parse_artifact(obj: dict) -> ArtifactSpec:
    try:
        kind = _KIND_ALIASES[str(obj["kind"]).strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown artifact kind {obj.get('kind')!r}") from None
    return ArtifactSpec(
        kind=kind,
        size_bytes=int(obj["size_bytes"]),
        load_cold_ms=float(obj.get("load_cold_ms", 0.0)),
        load_from_container_ms=float(obj.get("load_from_container_ms", 0.0)),
    )


def parse_function(obj: dict) -> FunctionSpec:
    return FunctionSpec(
        id=str(obj["id"]),
        backbone_id=obj.get("backbone"),
        artifacts=tuple(parse_artifact(a) for a in obj.get("artifacts", [])),
        slo_ttft_ms=float(obj["slo_ttft_ms"]),
        prefill_base_ms=float(obj["prefill_base_ms"]),
        prefill_marginal_ms=float(obj.get("prefill_marginal_ms", 0.0)),
        decode_ms_per_token=float(obj.get("decode_ms_per_token", 0.0)),
        kv_cache_bytes_per_request=int(obj.get("kv_bytes_per_request", 0)),
        container_init_ms=float(obj.get("container_init_ms", 0.0)),
    )


def load_functions(path) -> FunctionCatalog:
    doc = _load_doc(path)
    try:
        return FunctionCatalog([parse_function(f) for f in doc["functions"]])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc}") from None


def parse_cluster(doc: dict) -> ClusterSpec:
    try:
        containers = tuple((str(c["id"]), int(c["mem_bytes"])) for c in doc["containers"])
        gpus = tuple((str(g["id"]), int(g["mem_bytes"])) for g in doc["gpus"])
        adjacency = {str(c["id"]): str(c["gpu"]) for c in doc["containers"]}
    except KeyError as exc:
        raise ConfigError(f"cluster config: missing key {exc}") from None
    return ClusterSpec(
        containers=containers,
        gpus=gpus,
        adjacency=adjacency,
        context_overhead_bytes=int(doc.get("context_overhead_bytes", 0)),
    )


def load_cluster(path) -> ClusterSpec:
    return parse_cluster(_load_doc(path))
