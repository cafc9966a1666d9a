"""Routing policies: pick a client for each stage of each request.

Four policy families, two of them parameterized by a per-request load
metric, give the full strategy space: round-robin, least-outstanding,
load-based (three metrics), and heavy/light splitting (three metrics).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ConfigError, RoutingError
from .workload import Request, StageKind, total_decode_budget

METRIC_INPUT_CONTEXT = "input_context_len"
METRIC_KV_SIZE = "kv_cache_size"
METRIC_TOKENS_REMAINING = "tokens_remaining"
LOAD_METRICS = (METRIC_INPUT_CONTEXT, METRIC_KV_SIZE, METRIC_TOKENS_REMAINING)


def load_metric(request: Request, metric: str) -> float:
    """Per-request load under the named metric; absent stages contribute 0."""
    if metric == METRIC_INPUT_CONTEXT:
        total = 0
        for s in request.pipeline:
            if s.kind is StageKind.PREFILL:
                total += s.params.input_tokens
            elif s.kind is StageKind.RAG:
                total += s.params.docs_retrieved * s.params.doc_tokens
        return float(total)
    if metric == METRIC_KV_SIZE:
        return float(request.kv_bytes_resident)
    if metric == METRIC_TOKENS_REMAINING:
        try:
            budget = total_decode_budget(request)
        except ConfigError:
            return 0.0
        return float(budget - request.tokens_decoded)
    raise ConfigError(f"unknown load metric {metric!r}")


@dataclass
class ClientView:
    """Routing-relevant snapshot of one candidate client."""

    client_id: int
    outstanding: int = 0
    load: float = 0.0
    est_transfer_s: float = 0.0


class Router:
    """Base router; subclasses implement select()."""

    uses_metric: Optional[str] = None

    def route(self, request: Request, stage: StageKind,
              candidates: Sequence[ClientView]) -> int:
        if not candidates:
            raise RoutingError(
                f"request {request.id}: no candidate client for stage {stage.value}"
            )
        return self.select(request, stage, candidates)

    def select(self, request: Request, stage: StageKind,
               candidates: Sequence[ClientView]) -> int:
        raise NotImplementedError

    # Load bookkeeping hooks; only LoadBased tracks state here.
    def note_assigned(self, client_id: int, request: Request) -> None:
        pass

    def note_departed(self, client_id: int, request: Request) -> None:
        pass

    def load_of(self, client_id: int) -> float:
        return 0.0


class RoundRobinRouter(Router):
    """Cycles candidates per stage kind, ordered by client id."""

    def __init__(self) -> None:
        self._counters: dict[StageKind, int] = {}

    def select(self, request, stage, candidates):
        ordered = sorted(c.client_id for c in candidates)
        n = self._counters.get(stage, 0)
        self._counters[stage] = n + 1
        return ordered[n % len(ordered)]


class LeastOutstandingRouter(Router):
    """Fewest assigned-but-unfinished stages wins; ties to the lowest id."""

    def select(self, request, stage, candidates):
        return min(candidates, key=lambda c: (c.outstanding, c.client_id)).client_id


class LoadBasedRouter(Router):
    """Minimal accumulated load under a per-request metric.

    With a nonzero locality weight, a candidate's score is its load plus the
    weighted estimated transfer time of moving the request there, which
    favors co-located candidates.  Disabled (weight 0) by default.
    """

    def __init__(self, metric: str, locality_weight: float = 0.0) -> None:
        if metric not in LOAD_METRICS:
            raise ConfigError(f"unknown load metric {metric!r}")
        self.uses_metric = metric
        self.locality_weight = locality_weight
        self._loads: dict[int, float] = {}
        # Metric values can change while a stage runs (KV grows, tokens are
        # decoded), so remember exactly what each assignment contributed.
        self._contributions: dict[tuple[int, int], float] = {}

    def select(self, request, stage, candidates):
        def score(c: ClientView):
            return (c.load + self.locality_weight * c.est_transfer_s, c.client_id)
        return min(candidates, key=score).client_id

    def note_assigned(self, client_id, request):
        value = load_metric(request, self.uses_metric)
        self._contributions[(client_id, request.id)] = value
        self._loads[client_id] = self._loads.get(client_id, 0.0) + value

    def note_departed(self, client_id, request):
        value = self._contributions.pop((client_id, request.id), 0.0)
        self._loads[client_id] = self._loads.get(client_id, 0.0) - value

    def load_of(self, client_id):
        return self._loads.get(client_id, 0.0)


class HeavyLightSplitRouter(Router):
    """Requests above a metric threshold go to the heavy pool, the rest to
    the light pool; round-robin within each pool."""

    def __init__(self, metric: str, threshold: float,
                 heavy_pool: Sequence[int]) -> None:
        if metric not in LOAD_METRICS:
            raise ConfigError(f"unknown load metric {metric!r}")
        if not heavy_pool:
            raise ConfigError("heavy_light_split: heavy_pool must be non-empty")
        self.uses_metric = metric
        self.threshold = threshold
        self.heavy_pool = frozenset(heavy_pool)
        self._counters: dict[tuple[StageKind, bool], int] = {}

    def select(self, request, stage, candidates):
        heavy = load_metric(request, self.uses_metric) > self.threshold
        pool = [c.client_id for c in candidates
                if (c.client_id in self.heavy_pool) == heavy]
        if not pool:
            pool = [c.client_id for c in candidates]
        pool.sort()
        n = self._counters.get((stage, heavy), 0)
        self._counters[(stage, heavy)] = n + 1
        return pool[n % len(pool)]


def build_router(kind: str, metric: Optional[str] = None,
                 threshold: Optional[float] = None,
                 heavy_pool: Optional[Sequence[int]] = None,
                 locality_weight: float = 0.0) -> Router:
    if kind == "round_robin":
        return RoundRobinRouter()
    if kind == "least_outstanding":
        return LeastOutstandingRouter()
    if kind == "load_based":
        if metric is None:
            raise ConfigError("load_based router requires a metric")
        return LoadBasedRouter(metric, locality_weight=locality_weight)
    if kind == "heavy_light_split":
        if metric is None or threshold is None or heavy_pool is None:
            raise ConfigError(
                "heavy_light_split router requires metric, threshold, and heavy_pool"
            )
        return HeavyLightSplitRouter(metric, threshold, heavy_pool)
    raise ConfigError(f"unknown router kind {kind!r}")
