"""Requests, stage pipelines, and trace generation.

A request is an ordered pipeline of stages.  Each stage names the kind of
work (prefill, decode, retrieval-augmentation, KV-cache retrieval, reasoning,
or pre/post processing) plus the parameters that size it.  Traces either come
from a line-delimited JSON file or are generated synthetically from token-size
and arrival-time distributions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, TraceFormatError


class StageKind(str, Enum):
    PREPROCESS = "preprocess"
    RAG = "rag"
    KV_RETRIEVAL = "kv_retrieval"
    PREFILL = "prefill"
    REASON = "reason"
    DECODE = "decode"
    POSTPROCESS = "postprocess"


# Stage kinds executed by an LLM serving client.
LLM_STAGE_KINDS = frozenset({StageKind.PREFILL, StageKind.REASON, StageKind.DECODE})
# Stage kinds that generate output tokens one step at a time.
GENERATION_STAGE_KINDS = frozenset({StageKind.REASON, StageKind.DECODE})


@dataclass(frozen=True)
class PrefillParams:
    input_tokens: int


@dataclass(frozen=True)
class DecodeParams:
    output_tokens: int


@dataclass(frozen=True)
class ReasonParams:
    """Reasoning loop sized in scheduler steps.

    Each step emits tokens_per_step tokens along each of `width` parallel
    branches, so the stage expands the generation budget by
    steps * tokens_per_step * width tokens.
    """

    steps: int
    tokens_per_step: int
    width: int = 1


@dataclass(frozen=True)
class RagParams:
    query_tokens: int = 0
    docs_retrieved: int = 0
    doc_tokens: int = 0


@dataclass(frozen=True)
class KVRetrievalParams:
    cached_tokens: int
    # Optional identity of the cached prefix, used only by capacity-mode
    # cache levels to detect reuse across requests.
    prefix_id: Optional[str] = None


@dataclass(frozen=True)
class PrePostParams:
    op_class: str = "fixed_latency"  # linear_text | fixed_latency | small_model_pass
    length_tokens: int = 0


_PARAMS_BY_KIND = {
    StageKind.PREPROCESS: PrePostParams,
    StageKind.RAG: RagParams,
    StageKind.KV_RETRIEVAL: KVRetrievalParams,
    StageKind.PREFILL: PrefillParams,
    StageKind.REASON: ReasonParams,
    StageKind.DECODE: DecodeParams,
    StageKind.POSTPROCESS: PrePostParams,
}

_PREPOST_OP_CLASSES = ("linear_text", "fixed_latency", "small_model_pass")


@dataclass(frozen=True)
class StageSpec:
    kind: StageKind
    params: object

    def validate(self) -> None:
        expected = _PARAMS_BY_KIND[self.kind]
        if not isinstance(self.params, expected):
            raise ConfigError(
                f"stage {self.kind.value}: expected {expected.__name__} params"
            )
        p = self.params
        if isinstance(p, PrefillParams) and p.input_tokens <= 0:
            raise ConfigError("prefill: input_tokens must be > 0")
        if isinstance(p, DecodeParams) and p.output_tokens <= 0:
            raise ConfigError("decode: output_tokens must be > 0")
        if isinstance(p, ReasonParams):
            if p.steps < 1:
                raise ConfigError("reason: steps must be >= 1")
            if p.tokens_per_step <= 0:
                raise ConfigError("reason: tokens_per_step must be > 0")
            if p.width < 1:
                raise ConfigError("reason: width must be >= 1")
        if isinstance(p, RagParams):
            if p.query_tokens < 0 or p.docs_retrieved < 0 or p.doc_tokens < 0:
                raise ConfigError("rag: token and document counts must be >= 0")
        if isinstance(p, KVRetrievalParams) and p.cached_tokens < 0:
            raise ConfigError("kv_retrieval: cached_tokens must be >= 0")
        if isinstance(p, PrePostParams):
            if p.op_class not in _PREPOST_OP_CLASSES:
                raise ConfigError(
                    f"{self.kind.value}: unknown op_class {p.op_class!r}"
                )
            if p.length_tokens < 0:
                raise ConfigError(f"{self.kind.value}: length_tokens must be >= 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        for f in fields(self.params):
            v = getattr(self.params, f.name)
            if v is not None:
                d[f.name] = v
        return d


def stage_from_dict(d: dict) -> StageSpec:
    if "kind" not in d:
        raise ConfigError("stage record missing 'kind'")
    try:
        kind = StageKind(d["kind"])
    except ValueError:
        raise ConfigError(f"unknown stage kind {d['kind']!r}") from None
    cls = _PARAMS_BY_KIND[kind]
    names = {f.name for f in fields(cls)}
    extra = set(d) - names - {"kind"}
    if extra:
        raise ConfigError(
            f"stage {kind.value}: unknown field(s) {sorted(extra)}"
        )
    try:
        params = cls(**{k: v for k, v in d.items() if k in names})
    except TypeError as e:
        raise ConfigError(f"stage {kind.value}: {e}") from None
    spec = StageSpec(kind, params)
    spec.validate()
    return spec


def prefill_stage(input_tokens: int) -> StageSpec:
    return StageSpec(StageKind.PREFILL, PrefillParams(input_tokens))


def decode_stage(output_tokens: int) -> StageSpec:
    return StageSpec(StageKind.DECODE, DecodeParams(output_tokens))


def validate_pipeline(pipeline: Sequence[StageSpec]) -> None:
    """Check cross-stage ordering rules.

    Decode requires an earlier prefill; reasoning sits strictly between
    prefill and decode; a KV-retrieval stage may not promise more cached
    tokens than the following prefill consumes.
    """
    if not pipeline:
        raise ConfigError("pipeline must contain at least one stage")
    for spec in pipeline:
        spec.validate()
    kinds = [s.kind for s in pipeline]
    for i, spec in enumerate(pipeline):
        if spec.kind is StageKind.DECODE:
            if StageKind.PREFILL not in kinds[:i]:
                raise ConfigError("decode stage requires an earlier prefill stage")
        if spec.kind is StageKind.REASON:
            if StageKind.PREFILL not in kinds[:i]:
                raise ConfigError("reason stage requires an earlier prefill stage")
            if StageKind.DECODE not in kinds[i + 1:]:
                raise ConfigError("reason stage requires a later decode stage")
        if spec.kind is StageKind.KV_RETRIEVAL:
            nxt = next(
                (s for s in pipeline[i + 1:] if s.kind is StageKind.PREFILL), None
            )
            if nxt is None:
                raise ConfigError("kv_retrieval stage requires a later prefill stage")
            if spec.params.cached_tokens > nxt.params.input_tokens:
                raise ConfigError(
                    "kv_retrieval: cached_tokens exceeds the following "
                    "prefill input_tokens"
                )


@dataclass
class Request:
    """One inference request moving through its stage pipeline.

    The runtime fields below the pipeline are mutated by the engine and
    clients as the request progresses; clone() produces a fresh copy so a
    trace can be replayed without state leaking between runs.
    """

    id: int
    arrival_time: float
    pipeline: list[StageSpec]
    model_id: str = "default"

    # Runtime state.
    current_stage_index: int = 0
    tokens_prefilled: int = 0
    tokens_decoded: int = 0
    tokens_retrieved: int = 0
    prompt_extra_tokens: int = 0  # appended by RAG stages
    context_tokens: int = 0  # tokens whose KV is resident
    kv_bytes_resident: int = 0
    allotted_client: Optional[int] = None
    retrieval_outcome: Optional[str] = None  # hit | recompute
    status: str = "pending"  # pending | serviced | rejected
    reject_reason: Optional[str] = None

    def validate(self) -> None:
        if self.arrival_time < 0:
            raise ConfigError(f"request {self.id}: arrival_time must be >= 0")
        validate_pipeline(self.pipeline)

    def clone(self) -> "Request":
        return Request(
            id=self.id,
            arrival_time=self.arrival_time,
            pipeline=self.pipeline,
            model_id=self.model_id,
        )

    @property
    def current_stage(self) -> Optional[StageSpec]:
        if self.current_stage_index >= len(self.pipeline):
            return None
        return self.pipeline[self.current_stage_index]

    def stage_of_kind(self, kind: StageKind) -> Optional[StageSpec]:
        for s in self.pipeline:
            if s.kind is kind:
                return s
        return None


def total_decode_budget(request: Request) -> int:
    """Total generation tokens: decode output plus reasoning expansion."""
    budget = 0
    has_decode = False
    for s in request.pipeline:
        if s.kind is StageKind.DECODE:
            budget += s.params.output_tokens
            has_decode = True
        elif s.kind is StageKind.REASON:
            p = s.params
            budget += p.steps * p.tokens_per_step * p.width
    if not has_decode:
        raise ConfigError(f"request {request.id}: pipeline has no decode stage")
    return budget


# ---------------------------------------------------------------------------
# Synthetic trace generation


@dataclass(frozen=True)
class NormalSizeModel:
    mean_in: float
    var_in: float
    mean_out: float
    var_out: float


@dataclass(frozen=True)
class UniformArrival:
    rate: float  # requests per second, equally spaced


@dataclass(frozen=True)
class PoissonArrival:
    rate: float  # exponential inter-arrival gaps with mean 1/rate


@dataclass(frozen=True)
class NormalArrival:
    rate: float
    var: float  # variance of the inter-arrival gap, clamped at zero


@dataclass(frozen=True)
class BurstyArrival:
    """Bursts of burst_size simultaneous arrivals.

    Gaps between bursts are exponential with mean burst_gap; when burst_gap
    is omitted it is derived from the aggregate rate as burst_size / rate.
    """

    rate: float
    burst_size: int
    burst_gap: Optional[float] = None


@dataclass(frozen=True)
class TraceConfig:
    num_requests: int
    size_model: NormalSizeModel
    arrival_model: object
    seed: int = 0
    stages: Optional[tuple[StageSpec, ...]] = None  # pipeline template


def _validate_trace_config(cfg: TraceConfig) -> None:
    if cfg.num_requests < 0:
        raise ConfigError("num_requests must be >= 0")
    sm = cfg.size_model
    if sm.mean_in <= 0 or sm.mean_out <= 0:
        raise ConfigError("size_model: mean_in and mean_out must be > 0")
    if sm.var_in < 0 or sm.var_out < 0:
        raise ConfigError("size_model: variances must be >= 0")
    am = cfg.arrival_model
    if getattr(am, "rate", 1.0) <= 0:
        raise ConfigError("arrival_model: rate must be > 0")
    if isinstance(am, NormalArrival) and am.var < 0:
        raise ConfigError("arrival_model: var must be >= 0")
    if isinstance(am, BurstyArrival):
        if am.burst_size < 1:
            raise ConfigError("arrival_model: burst_size must be >= 1")
        if am.burst_gap is not None and am.burst_gap <= 0:
            raise ConfigError("arrival_model: burst_gap must be > 0")


def _sample_sizes(rng: np.random.Generator, mean: float, var: float, n: int) -> np.ndarray:
    raw = rng.normal(mean, math.sqrt(var), size=n)
    return np.maximum(1, np.rint(raw)).astype(int)


def _sample_arrivals(rng: np.random.Generator, model: object, n: int) -> np.ndarray:
    """Arrival times sorted ascending with request 0 at t=0."""
    if n == 0:
        return np.zeros(0)
    if isinstance(model, UniformArrival):
        return np.arange(n) / model.rate
    if isinstance(model, PoissonArrival):
        gaps = rng.exponential(1.0 / model.rate, size=n - 1)
    elif isinstance(model, NormalArrival):
        gaps = np.maximum(0.0, rng.normal(1.0 / model.rate, math.sqrt(model.var), size=n - 1))
    elif isinstance(model, BurstyArrival):
        mean_gap = model.burst_gap
        if mean_gap is None:
            mean_gap = model.burst_size / model.rate
        n_bursts = (n + model.burst_size - 1) // model.burst_size
        burst_times = np.concatenate(
            [[0.0], np.cumsum(rng.exponential(mean_gap, size=n_bursts - 1))]
        )
        times = np.repeat(burst_times, model.burst_size)[:n]
        return times
    else:
        raise ConfigError(f"unknown arrival model {type(model).__name__}")
    return np.concatenate([[0.0], np.cumsum(gaps)])


def _instantiate_pipeline(
    template: Optional[tuple[StageSpec, ...]], n_in: int, n_out: int
) -> list[StageSpec]:
    """Fill a pipeline template with sampled token counts.

    The sampled input size replaces the prefill's input_tokens and the
    sampled output size replaces the decode's output_tokens; every other
    stage is copied verbatim.  Without a template the pipeline is a plain
    prefill followed by decode.
    """
    if template is None:
        return [prefill_stage(n_in), decode_stage(n_out)]
    out: list[StageSpec] = []
    for spec in template:
        if spec.kind is StageKind.PREFILL:
            out.append(prefill_stage(n_in))
        elif spec.kind is StageKind.DECODE:
            out.append(decode_stage(n_out))
        else:
            out.append(spec)
    return out


def generate_trace(cfg: TraceConfig) -> list[Request]:
    """Generate a deterministic synthetic request list from the config."""
    _validate_trace_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_requests
    in_tokens = _sample_sizes(rng, cfg.size_model.mean_in, cfg.size_model.var_in, n)
    out_tokens = _sample_sizes(rng, cfg.size_model.mean_out, cfg.size_model.var_out, n)
    arrivals = _sample_arrivals(rng, cfg.arrival_model, n)
    # The template's prefill/decode token counts are placeholders, so the
    # template itself may not validate; every instantiated pipeline does.
    requests = []
    for i in range(n):
        # Template cached_tokens may exceed a small sampled prompt; lift the
        # prompt so the pipeline stays valid.
        n_in = int(in_tokens[i])
        if cfg.stages is not None:
            for spec in cfg.stages:
                if spec.kind is StageKind.KV_RETRIEVAL:
                    n_in = max(n_in, spec.params.cached_tokens)
        req = Request(
            id=i,
            arrival_time=float(arrivals[i]),
            pipeline=_instantiate_pipeline(cfg.stages, n_in, int(out_tokens[i])),
        )
        req.validate()
        requests.append(req)
    return requests


# ---------------------------------------------------------------------------
# Trace file I/O (line-delimited JSON)


def request_to_record(req: Request) -> dict:
    rec = {
        "arrival_s": req.arrival_time,
        "stages": [s.to_dict() for s in req.pipeline],
    }
    if req.model_id != "default":
        rec["model_id"] = req.model_id
    return rec


def request_from_record(rec: dict, rid: int) -> Request:
    if not isinstance(rec, dict) or "arrival_s" not in rec or "stages" not in rec:
        raise ConfigError("trace record needs 'arrival_s' and 'stages'")
    req = Request(
        id=rid,
        arrival_time=float(rec["arrival_s"]),
        pipeline=[stage_from_dict(s) for s in rec["stages"]],
        model_id=rec.get("model_id", "default"),
    )
    req.validate()
    return req


def load_trace(path: str, format: str = "jsonl") -> list[Request]:
    """Load a trace file: one JSON record per line.

    Record schema: {"arrival_s": float, "stages": [{"kind": ..., ...}],
    "model_id": optional str}.  Arrival times must be non-decreasing.
    """
    if format != "jsonl":
        raise ConfigError(f"unknown trace format {format!r}")
    requests: list[Request] = []
    last_arrival = -math.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"{path}:{lineno}: invalid JSON ({e})") from None
            try:
                req = request_from_record(rec, len(requests))
            except ConfigError as e:
                raise TraceFormatError(f"{path}:{lineno}: {e}") from None
            if req.arrival_time < last_arrival:
                raise TraceFormatError(
                    f"{path}:{lineno}: arrival_s decreases "
                    f"({req.arrival_time} < {last_arrival})"
                )
            last_arrival = req.arrival_time
            requests.append(req)
    return requests


def save_trace(requests: Sequence[Request], path: str) -> None:
    with open(path, "w") as fh:
        for req in requests:
            fh.write(json.dumps(request_to_record(req)) + "\n")
