"""Discrete-event simulation of multi-stage LLM inference serving."""

from .clients import (
    BATCHING_CHUNKED,
    BATCHING_CONTINUOUS,
    BATCHING_DISAGGREGATED,
    BATCHING_MIXED,
    BATCHING_STATIC,
    KVRetrievalClient,
    LLMClient,
    PrePostClient,
    RagClient,
)
from .config import build_simulation, load_config, run_from_config
from .engine import Coordinator, SimulationResult, TransferConfig
from .errors import (
    AdmissionError,
    ConfigError,
    DeadlockError,
    ExtrapolationError,
    HardwareModelError,
    RoutingError,
    SimulationError,
    StagesimError,
    TraceFormatError,
)
from .hardware import (
    ClientInterconnect,
    ClusterHandle,
    EmpiricalTable,
    HardwareSKU,
    LinkSpec,
    MemoryHierarchy,
    MemoryLevel,
    ModelSpec,
    Placement,
    kv_bytes,
    llm_step_runtime,
    retrieval_latency,
    single_site_topology,
)
from .metrics import (
    MetricsLedger,
    SLOSpec,
    build_summary,
    export_chrome_trace,
    goodput,
    percentile,
    tokens_per_dollar,
)
from .routing import (
    HeavyLightSplitRouter,
    LeastOutstandingRouter,
    LoadBasedRouter,
    RoundRobinRouter,
    build_router,
)
from .sweep import SweepPoint, SweepSpace, enumerate_points, run_sweep
from .workload import (
    Request,
    StageKind,
    StageSpec,
    TraceConfig,
    decode_stage,
    generate_trace,
    load_trace,
    prefill_stage,
    save_trace,
    total_decode_budget,
    validate_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "AdmissionError",
    "BATCHING_CHUNKED",
    "BATCHING_CONTINUOUS",
    "BATCHING_DISAGGREGATED",
    "BATCHING_MIXED",
    "BATCHING_STATIC",
    "ClientInterconnect",
    "ClusterHandle",
    "ConfigError",
    "Coordinator",
    "DeadlockError",
    "EmpiricalTable",
    "ExtrapolationError",
    "HardwareModelError",
    "HardwareSKU",
    "HeavyLightSplitRouter",
    "KVRetrievalClient",
    "LLMClient",
    "LeastOutstandingRouter",
    "LinkSpec",
    "LoadBasedRouter",
    "MemoryHierarchy",
    "MemoryLevel",
    "MetricsLedger",
    "ModelSpec",
    "Placement",
    "PrePostClient",
    "RagClient",
    "Request",
    "RoundRobinRouter",
    "RoutingError",
    "SLOSpec",
    "SimulationError",
    "SimulationResult",
    "StageKind",
    "StageSpec",
    "StagesimError",
    "SweepPoint",
    "SweepSpace",
    "TraceConfig",
    "TraceFormatError",
    "TransferConfig",
    "build_router",
    "build_simulation",
    "build_summary",
    "decode_stage",
    "enumerate_points",
    "export_chrome_trace",
    "generate_trace",
    "goodput",
    "kv_bytes",
    "llm_step_runtime",
    "load_config",
    "load_trace",
    "percentile",
    "prefill_stage",
    "retrieval_latency",
    "run_from_config",
    "run_sweep",
    "save_trace",
    "single_site_topology",
    "tokens_per_dollar",
    "total_decode_budget",
    "validate_pipeline",
]
