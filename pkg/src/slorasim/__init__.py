"""Deterministic simulator and scheduling library for serverless LoRA-LLM
inference: artifact pre-loading, adaptive batching, value-based offloading,
and backbone-sharing memory accounting."""

from .core import (
    ArrivalStats,
    ArtifactKind,
    ArtifactSpec,
    ClusterSpec,
    ConfigError,
    FunctionCatalog,
    FunctionSpec,
    Placement,
    PreloadPlan,
    TierKind,
    UnknownIdError,
    Violation,
    ViolationCode,
    load_cluster,
    load_functions,
    validate_plan,
)
from .engine import Pricing, SimConfig, SimulationResult, cost_effectiveness, monetary_cost, run
from .workload import CovClass, Trace, TraceRecord, classify_cov, generate_trace

__version__ = "0.1.0"

__all__ = [
    "ArrivalStats",
    "ArtifactKind",
    "ArtifactSpec",
    "ClusterSpec",
    "ConfigError",
    "CovClass",
    "FunctionCatalog",
    "FunctionSpec",
    "Placement",
    "PreloadPlan",
    "Pricing",
    "SimConfig",
    "SimulationResult",
    "TierKind",
    "Trace",
    "TraceRecord",
    "UnknownIdError",
    "Violation",
    "ViolationCode",
    "classify_cov",
    "cost_effectiveness",
    "generate_trace",
    "load_cluster",
    "load_functions",
    "monetary_cost",
    "run",
    "validate_plan",
]
