import pytest

from slorasim.core import ArtifactKind, ArtifactSpec, ClusterSpec, FunctionCatalog, FunctionSpec

GB = 1_000_000_000


def make_function(fid="f0", *, backbone_id=None, artifacts=(), slo_ttft_ms=2500.0,
                  prefill_base_ms=500.0, prefill_marginal_ms=100.0,
                  decode_ms_per_token=0.0, kv_bytes=0, container_init_ms=0.0):
    return FunctionSpec(
        id=fid,
        backbone_id=backbone_id,
        artifacts=tuple(artifacts),
        slo_ttft_ms=slo_ttft_ms,
        prefill_base_ms=prefill_base_ms,
        prefill_marginal_ms=prefill_marginal_ms,
        decode_ms_per_token=decode_ms_per_token,
        kv_cache_bytes_per_request=kv_bytes,
        container_init_ms=container_init_ms,
    )


def artifact(kind, size_gb=1.0, cold_ms=1000.0, from_container_ms=0.0):
    return ArtifactSpec(
        kind=kind,
        size_bytes=int(size_gb * GB),
        load_cold_ms=cold_ms,
        load_from_container_ms=from_container_ms,
    )


def shared_family(n_adapters=2):
    """One backbone owner plus ``n_adapters`` adapter functions."""
    owner = make_function("owner", artifacts=[
        artifact(ArtifactKind.LIBRARY, 2.0),
        artifact(ArtifactKind.BACKBONE_MODEL, 14.0, 7000.0, 280.0),
        artifact(ArtifactKind.KERNEL, 0.5, 500.0),
    ])
    adapters = [
        make_function(f"ad{i}", backbone_id="owner", artifacts=[
            artifact(ArtifactKind.LIBRARY, 2.0),
            artifact(ArtifactKind.ADAPTER_MODEL, 0.2, 100.0, 4.0),
            artifact(ArtifactKind.KERNEL, 0.5, 500.0),
        ])
        for i in range(n_adapters)
    ]
    return FunctionCatalog([owner, *adapters])


def one_gpu_cluster(gpu_gb=64, container_gb=64, context_overhead_bytes=0):
    return ClusterSpec(
        containers=(("c0", container_gb * GB),),
        gpus=(("g0", gpu_gb * GB),),
        adjacency={"c0": "g0"},
        context_overhead_bytes=context_overhead_bytes,
    )


@pytest.fixture
def family():
    return shared_family()


@pytest.fixture
def small_cluster():
    return one_gpu_cluster()
