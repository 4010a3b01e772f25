"""Bundled desk-scale experiment profiles.

Two backbone families (7B and 13B class, fp16 so bytes = 2 x parameters)
with four adapter functions each, a matching two-GPU cluster, and a pricing
schedule where GPU time dominates the bill. Sizes use decimal GB (1e9
bytes); load times assume a 2 GB/s cold fetch from remote storage and a
50 GB/s container-to-GPU promotion path.
"""

from __future__ import annotations

import io

import yaml

from .core import FunctionCatalog, parse_cluster, parse_function
from .engine import Pricing

GB = 1_000_000_000

# 473 MB CUDA context per resident process.
CONTEXT_OVERHEAD_BYTES = 473_000_000

DEFAULT_FUNCTIONS_YAML = """\
# Desk-scale function catalog: two backbone families with four LoRA
# adapter functions each. Backbone bytes = parameter count x 2 (fp16).
# Model fetches assume 2 GB/s remote storage; container-to-GPU 50 GB/s.
# Kernels are built locally at process start, not fetched.
functions:
  - id: llama7b
    slo_ttft_ms: 2500          # 5x the 500 ms warm prefill
    prefill_base_ms: 500
    prefill_marginal_ms: 100
    decode_ms_per_token: 10
    kv_bytes_per_request: 100000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: backbone, size_bytes: 14000000000, load_cold_ms: 7000, load_from_container_ms: 280}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 7b-chat
    backbone: llama7b
    slo_ttft_ms: 2500
    prefill_base_ms: 500
    prefill_marginal_ms: 100
    decode_ms_per_token: 10
    kv_bytes_per_request: 100000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 7b-code
    backbone: llama7b
    slo_ttft_ms: 2500
    prefill_base_ms: 500
    prefill_marginal_ms: 100
    decode_ms_per_token: 10
    kv_bytes_per_request: 100000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 7b-summarize
    backbone: llama7b
    slo_ttft_ms: 2500
    prefill_base_ms: 500
    prefill_marginal_ms: 100
    decode_ms_per_token: 10
    kv_bytes_per_request: 100000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 7b-extract
    backbone: llama7b
    slo_ttft_ms: 2500
    prefill_base_ms: 500
    prefill_marginal_ms: 100
    decode_ms_per_token: 10
    kv_bytes_per_request: 100000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: llama13b
    slo_ttft_ms: 4000          # 5x the 800 ms warm prefill
    prefill_base_ms: 800
    prefill_marginal_ms: 160
    decode_ms_per_token: 15
    kv_bytes_per_request: 150000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: backbone, size_bytes: 26000000000, load_cold_ms: 13000, load_from_container_ms: 520}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 13b-chat
    backbone: llama13b
    slo_ttft_ms: 4000
    prefill_base_ms: 800
    prefill_marginal_ms: 160
    decode_ms_per_token: 15
    kv_bytes_per_request: 150000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 13b-code
    backbone: llama13b
    slo_ttft_ms: 4000
    prefill_base_ms: 800
    prefill_marginal_ms: 160
    decode_ms_per_token: 15
    kv_bytes_per_request: 150000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 13b-summarize
    backbone: llama13b
    slo_ttft_ms: 4000
    prefill_base_ms: 800
    prefill_marginal_ms: 160
    decode_ms_per_token: 15
    kv_bytes_per_request: 150000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
  - id: 13b-extract
    backbone: llama13b
    slo_ttft_ms: 4000
    prefill_base_ms: 800
    prefill_marginal_ms: 160
    decode_ms_per_token: 15
    kv_bytes_per_request: 150000000
    container_init_ms: 800
    artifacts:
      - {kind: library, size_bytes: 2000000000, load_cold_ms: 1000}
      - {kind: adapter, size_bytes: 200000000, load_cold_ms: 100, load_from_container_ms: 4}
      - {kind: kernel, size_bytes: 500000000, load_cold_ms: 500}
"""

DEFAULT_CLUSTER_YAML = f"""\
# Two desk GPUs, two host containers each. 17 GB holds the shared 7B
# backbone plus two adapter functions with a slim KV margin, so the
# no-sharing and no-offloading variants feel real memory pressure. The
# 13B family is declared in the catalog but needs larger GPUs to run.
context_overhead_bytes: {CONTEXT_OVERHEAD_BYTES}
gpus:
  - {{id: gpu0, mem_bytes: 17000000000}}
  - {{id: gpu1, mem_bytes: 17000000000}}
containers:
  - {{id: host0a, mem_bytes: 48000000000, gpu: gpu0}}
  - {{id: host0b, mem_bytes: 48000000000, gpu: gpu0}}
  - {{id: host1a, mem_bytes: 48000000000, gpu: gpu1}}
  - {{id: host1b, mem_bytes: 48000000000, gpu: gpu1}}
"""

DEFAULT_PRICING_YAML = """\
# Per-second unit prices; GPU time dominates a typical bill.
pricing:
  gpu_per_s: 0.01
  mem_gb_per_s: 0.00001
  cpu_core_per_s: 0.0001
"""


def default_functions_yaml() -> str:
    return DEFAULT_FUNCTIONS_YAML


def default_cluster_yaml() -> str:
    return DEFAULT_CLUSTER_YAML


def default_pricing_yaml() -> str:
    return DEFAULT_PRICING_YAML


def default_functions() -> FunctionCatalog:
    doc = yaml.safe_load(io.StringIO(DEFAULT_FUNCTIONS_YAML))
    return FunctionCatalog([parse_function(f) for f in doc["functions"]])


def default_cluster():
    return parse_cluster(yaml.safe_load(io.StringIO(DEFAULT_CLUSTER_YAML)))


def default_pricing() -> Pricing:
    return Pricing.from_dict(yaml.safe_load(io.StringIO(DEFAULT_PRICING_YAML)))


def saturation_functions() -> FunctionCatalog:
    """7B family with four heavyweight variants: each function carries a
    4 GB adapter stack and a 3 GB compiled-engine kernel, so its private
    footprint (7.473 GB with the process context) rivals half a backbone.
    Timing profile matches the stock 7B functions."""
    common = dict(
        slo_ttft_ms=2500, prefill_base_ms=500, prefill_marginal_ms=100,
        decode_ms_per_token=10, kv_bytes_per_request=100_000_000,
        container_init_ms=800)
    backbone = {
        "id": "llama7b", **common,
        "artifacts": [
            {"kind": "library", "size_bytes": 2 * GB, "load_cold_ms": 1000},
            {"kind": "backbone", "size_bytes": 14 * GB, "load_cold_ms": 7000,
             "load_from_container_ms": 280},
            {"kind": "kernel", "size_bytes": 500_000_000, "load_cold_ms": 2500},
        ],
    }
    fns = [backbone]
    for name in ("chat", "code", "summarize", "extract"):
        fns.append({
            "id": f"7b-{name}-xl", "backbone": "llama7b", **common,
            "artifacts": [
                {"kind": "library", "size_bytes": 2 * GB, "load_cold_ms": 1000},
                {"kind": "adapter", "size_bytes": 4 * GB, "load_cold_ms": 2000,
                 "load_from_container_ms": 80},
                {"kind": "kernel", "size_bytes": 3 * GB, "load_cold_ms": 1500},
            ],
        })
    return FunctionCatalog([parse_function(f) for f in fns])


def saturation_cluster():
    """Two GPUs sized against the heavyweight saturation catalog: two private
    backbone stacks just fit per GPU (2 x 21.473 GB = 42.946 GB) with under
    half a GB of KV-cache margin, while a shared backbone plus two function
    sets (28.946 GB) leaves ~14.5 GB. All four private stacks cannot crowd
    onto one GPU (14 + 4 x 7.473 = 43.892 GB), so placement must spread the
    load across both GPUs."""
    doc = {
        "context_overhead_bytes": CONTEXT_OVERHEAD_BYTES,
        "gpus": [
            {"id": "gpu0", "mem_bytes": 43_400_000_000},
            {"id": "gpu1", "mem_bytes": 43_400_000_000},
        ],
        "containers": [
            {"id": "host0", "mem_bytes": 48 * GB, "gpu": "gpu0"},
            {"id": "host1", "mem_bytes": 48 * GB, "gpu": "gpu1"},
        ],
    }
    return parse_cluster(doc)
