"""Clients: schedulers that turn queued stages into timed execution steps.

An LLM client batches prefill and generation work under one of five batching
strategies on a device cluster.  RAG and KV-retrieval clients run batched
steps where every queued item is serviced together; pre/post-processing
clients run a fixed number of tasks concurrently, one per core.

A client never preempts a step in flight.  The engine calls next_step() when
the client is free; the returned runtime dates every effect of the step at
its end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AdmissionError, ConfigError, HardwareModelError
from .hardware import (
    ClusterHandle,
    LRUPrefixCache,
    MemoryHierarchy,
    ModelSpec,
    RECOMPUTE_LEVEL,
    TERMINAL_RECOMPUTE,
    kv_bytes,
    llm_step_runtime,
    retrieval_latency,
)
from .workload import (
    GENERATION_STAGE_KINDS,
    LLM_STAGE_KINDS,
    Request,
    StageKind,
    total_decode_budget,
)

BATCHING_STATIC = "static"
BATCHING_CONTINUOUS = "continuous"
BATCHING_CHUNKED = "chunked"
BATCHING_MIXED = "mixed"
BATCHING_DISAGGREGATED = "disaggregated"
BATCHING_STRATEGIES = (
    BATCHING_STATIC, BATCHING_CONTINUOUS, BATCHING_CHUNKED,
    BATCHING_MIXED, BATCHING_DISAGGREGATED,
)
CHUNKING_STRATEGIES = (BATCHING_CHUNKED, BATCHING_MIXED)

PACKING_FCFS = "fcfs"
PACKING_LEAST_WORK_LEFT = "least_work_left"

ROLE_PREFILL = "prefill_side"
ROLE_DECODE = "decode_side"


@dataclass
class StepBatch:
    """Composition of one LLM step: prefill chunks plus decode tokens."""

    prefill_items: list[tuple[int, int]] = field(default_factory=list)  # (rid, tokens)
    decode_items: list[int] = field(default_factory=list)  # rids, 1 token each

    @property
    def total_tokens(self) -> int:
        return sum(t for _, t in self.prefill_items) + len(self.decode_items)

    @property
    def n_items(self) -> int:
        return len(self.prefill_items) + len(self.decode_items)


@dataclass
class StepResult:
    runtime: float
    finished: list[Request]
    batch: Optional[StepBatch] = None
    items: list[tuple[int, str, int]] = field(default_factory=list)  # (rid, kind, tokens)


@dataclass
class _WorkEntry:
    request: Request
    work: str  # "prefill" | "generate"
    remaining: int
    arrival_seq: int


class Client:
    """Base client: a queue of stage residencies plus non-preemptive steps."""

    def __init__(self, client_id: int, capabilities: frozenset[StageKind]):
        self.id = client_id
        self.capabilities = capabilities
        self.busy_until = 0.0
        self.step_pending = False
        self._seq = 0
        self.wait: list[_WorkEntry] = []

    def serves(self, request: Request, stage: StageKind) -> bool:
        return stage in self.capabilities

    def add(self, request: Request, clock: float) -> Optional[str]:
        """Enqueue a request's current stage.  Returns a rejection reason
        string if the stage can never be scheduled here, else None."""
        raise NotImplementedError

    def next_step(self, clock: float) -> Optional[StepResult]:
        raise NotImplementedError

    def release(self, request: Request) -> None:
        """Drop per-request state once the request leaves this client."""

    def has_work(self) -> bool:
        return bool(self.wait)

    def outstanding(self) -> int:
        return len(self.wait)

    def queue_len(self) -> int:
        return len(self.wait)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq


# ---------------------------------------------------------------------------
# LLM serving client


class LLMClient(Client):
    """Batched LLM inference over a device cluster.

    Admission reserves the full projected KV footprint (prompt, retrieved
    prefix, and complete decode budget) so concurrent growth can never
    exceed capacity; requests whose reservation cannot fit yet are skipped,
    not head-of-line blocked.  Completed requests' KV is freed at the step
    boundary where they finish.
    """

    def __init__(self, client_id: int, cluster: ClusterHandle, model: ModelSpec,
                 batching: str = BATCHING_CONTINUOUS,
                 packing: str = PACKING_FCFS,
                 max_batched_tokens: int = 4096,
                 max_batch_size: int = 256,
                 chunk_size: int = 512,
                 kv_capacity_bytes: Optional[int] = None,
                 role: Optional[str] = None,
                 peer_client: Optional[int] = None):
        if batching not in BATCHING_STRATEGIES:
            raise ConfigError(f"client {client_id}: unknown batching {batching!r}")
        if packing not in (PACKING_FCFS, PACKING_LEAST_WORK_LEFT):
            raise ConfigError(f"client {client_id}: unknown packing {packing!r}")
        if max_batched_tokens < 1 or max_batch_size < 1:
            raise ConfigError(f"client {client_id}: batch limits must be >= 1")
        if batching in CHUNKING_STRATEGIES and chunk_size < 1:
            raise ConfigError(f"client {client_id}: chunk_size must be >= 1")
        if batching == BATCHING_DISAGGREGATED:
            if role not in (ROLE_PREFILL, ROLE_DECODE):
                raise ConfigError(
                    f"client {client_id}: disaggregated batching needs a role"
                )
            if peer_client is None:
                raise ConfigError(
                    f"client {client_id}: disaggregated batching needs a peer_client"
                )
            capabilities = (frozenset({StageKind.PREFILL}) if role == ROLE_PREFILL
                            else frozenset(GENERATION_STAGE_KINDS))
        else:
            capabilities = frozenset(LLM_STAGE_KINDS)
        super().__init__(client_id, capabilities)
        cluster.validate()
        model.validate()
        self.cluster = cluster
        self.model = model
        self.batching = batching
        self.packing = packing
        self.max_batched_tokens = max_batched_tokens
        self.max_batch_size = max_batch_size
        self.chunk_size = chunk_size
        if kv_capacity_bytes is None:
            # Whatever HBM the model weights leave free across the pool.
            kv_capacity_bytes = int(
                cluster.sku.mem_capacity * cluster.n_devices - model.weight_bytes
            )
        if kv_capacity_bytes <= 0:
            raise ConfigError(f"client {client_id}: kv_capacity_bytes must be > 0")
        self.kv_capacity_bytes = kv_capacity_bytes
        self.role = role
        self.peer_client = peer_client

        self.running: list[_WorkEntry] = []
        self.kv_used = 0
        self._reservations: dict[int, int] = {}  # rid -> projected bytes
        self._static_members: set[int] = set()

    def serves(self, request: Request, stage: StageKind) -> bool:
        return stage in self.capabilities and request.model_id == self.model.name

    # -- admission ---------------------------------------------------------

    def _effective_prefill(self, request: Request, input_tokens: int) -> int:
        # A fully cached prompt still recomputes its last token to produce
        # logits, so the effective prefill never drops below one token.
        return max(1, input_tokens + request.prompt_extra_tokens
                   - request.tokens_retrieved)

    def _projected_kv(self, request: Request) -> int:
        """KV footprint at completion: current residency plus every token the
        remaining LLM stages will append."""
        future = 0
        for s in request.pipeline[request.current_stage_index:]:
            if s.kind is StageKind.PREFILL:
                future += self._effective_prefill(request, s.params.input_tokens)
            elif s.kind is StageKind.DECODE:
                future += s.params.output_tokens
            elif s.kind is StageKind.REASON:
                p = s.params
                future += p.steps * p.tokens_per_step * p.width
        return request.kv_bytes_resident + kv_bytes(self.model, future)

    def add(self, request: Request, clock: float) -> Optional[str]:
        stage = request.current_stage
        if stage.kind not in self.capabilities:
            raise AdmissionError(
                f"client {self.id} cannot serve stage {stage.kind.value}"
            )
        if stage.kind is StageKind.PREFILL:
            effective = self._effective_prefill(request, stage.params.input_tokens)
            entry = _WorkEntry(request, "prefill", effective, self._next_seq())
            if (self.batching not in CHUNKING_STRATEGIES
                    and effective > self.max_batched_tokens):
                return (f"prefill of {effective} tokens exceeds max_batched_tokens "
                        f"{self.max_batched_tokens} under {self.batching} batching")
        elif stage.kind is StageKind.DECODE:
            entry = _WorkEntry(request, "generate", stage.params.output_tokens,
                               self._next_seq())
        elif stage.kind is StageKind.REASON:
            p = stage.params
            entry = _WorkEntry(request, "generate",
                               p.steps * p.tokens_per_step * p.width,
                               self._next_seq())
        else:  # pragma: no cover - capability check above
            raise AdmissionError(f"unexpected stage {stage.kind.value}")
        if request.id in self._reservations:
            # Continuation of a request already resident here (e.g. decode
            # after prefill): bypass admission, keep the reservation.
            self.running.append(entry)
            return None
        if self._projected_kv(request) > self.kv_capacity_bytes:
            return (f"projected KV footprint exceeds capacity "
                    f"{self.kv_capacity_bytes} bytes")
        self.wait.append(entry)
        return None

    def _pack_key(self, entry: _WorkEntry):
        if self.packing == PACKING_FCFS:
            return (entry.arrival_seq,)
        req = entry.request
        unprefilled = entry.remaining if entry.work == "prefill" else 0
        try:
            budget = total_decode_budget(req)
        except ConfigError:
            budget = 0
        return (unprefilled + max(0, budget - req.tokens_decoded), req.id)

    def _admit(self) -> None:
        if self.batching == BATCHING_STATIC and self._static_members:
            return  # run-to-completion: no admission while a batch is in flight
        reserved = sum(self._reservations.values())
        admitted: list[_WorkEntry] = []
        capacity_left = self.max_batch_size - len(self.running) \
            if self.batching == BATCHING_STATIC else None
        for entry in sorted(self.wait, key=self._pack_key):
            if capacity_left is not None and len(admitted) >= capacity_left:
                break
            projected = self._projected_kv(entry.request)
            if reserved + projected > self.kv_capacity_bytes:
                continue  # does not fit yet; try the next candidate
            reserved += projected
            self._reservations[entry.request.id] = projected
            self.kv_used += entry.request.kv_bytes_resident
            admitted.append(entry)
            if self.batching == BATCHING_STATIC:
                self._static_members.add(entry.request.id)
        for entry in admitted:
            self.wait.remove(entry)
            self.running.append(entry)

    # -- step formation ----------------------------------------------------

    def _form_batch(self) -> StepBatch:
        prefills = sorted(
            (e for e in self.running if e.work == "prefill" and e.remaining > 0),
            key=self._pack_key)
        decodes = sorted(
            (e for e in self.running if e.work == "generate" and e.remaining > 0),
            key=self._pack_key)
        batch = StepBatch()
        budget = self.max_batched_tokens
        slots = self.max_batch_size

        def take_decodes(entries, max_n):
            n = min(len(entries), max_n)
            return entries[:n]

        if self.batching in (BATCHING_STATIC, BATCHING_CONTINUOUS,
                             BATCHING_DISAGGREGATED):
            # Waiting prefills preempt decode scheduling; full prompts only.
            if prefills:
                for e in prefills:
                    if slots == 0:
                        break
                    if e.remaining <= budget:
                        batch.prefill_items.append((e.request.id, e.remaining))
                        budget -= e.remaining
                        slots -= 1
            else:
                for e in take_decodes(decodes, min(slots, budget)):
                    batch.decode_items.append(e.request.id)
        elif self.batching == BATCHING_CHUNKED:
            for e in take_decodes(decodes, min(slots, budget)):
                batch.decode_items.append(e.request.id)
            budget -= len(batch.decode_items)
            slots -= len(batch.decode_items)
            for e in prefills:
                if slots == 0 or budget == 0:
                    break
                chunk = min(self.chunk_size, e.remaining, budget)
                batch.prefill_items.append((e.request.id, chunk))
                budget -= chunk
                slots -= 1
        else:  # mixed: prefill chunks claim slots first, decodes fill in
            def chunk_pass(token_budget, slot_budget):
                items = []
                for e in prefills:
                    if slot_budget <= 0 or token_budget <= 0:
                        break
                    chunk = min(self.chunk_size, e.remaining, token_budget)
                    items.append((e.request.id, chunk))
                    token_budget -= chunk
                    slot_budget -= 1
                return items
            # Decodes are entitled to leftover slots and run alongside the
            # chunks, so the chunk pass is redone with the token budget they
            # will consume carved out.  Each decode costs one token, so the
            # entitlement can never exceed the token budget either.
            items = chunk_pass(budget, slots)
            n_dec = min(len(decodes), slots - len(items), budget)
            if n_dec > 0:
                items = chunk_pass(budget - n_dec, slots - n_dec)
            n_dec = min(len(decodes), slots - len(items),
                        budget - sum(t for _, t in items))
            batch.prefill_items = items
            batch.decode_items = [e.request.id for e in decodes[:max(0, n_dec)]]
        return batch

    def next_step(self, clock: float) -> Optional[StepResult]:
        self._admit()
        batch = self._form_batch()
        if batch.n_items == 0:
            return None
        by_id = {e.request.id: e for e in self.running}
        decode_ctx = [by_id[rid].request.context_tokens for rid in batch.decode_items]
        runtime = llm_step_runtime(
            self.cluster, self.model,
            [t for _, t in batch.prefill_items], decode_ctx)
        finished: list[Request] = []
        items: list[tuple[int, str, int]] = []
        for rid, tokens in batch.prefill_items:
            e = by_id[rid]
            e.remaining -= tokens
            req = e.request
            req.tokens_prefilled += tokens
            req.context_tokens += tokens
            grown = kv_bytes(self.model, tokens)
            req.kv_bytes_resident += grown
            self.kv_used += grown
            items.append((rid, "prefill", tokens))
            if e.remaining == 0:
                finished.append(req)
                self.running.remove(e)
        for rid in batch.decode_items:
            e = by_id[rid]
            e.remaining -= 1
            req = e.request
            req.tokens_decoded += 1
            req.context_tokens += 1
            grown = kv_bytes(self.model, 1)
            req.kv_bytes_resident += grown
            self.kv_used += grown
            items.append((rid, "decode", 1))
            if e.remaining == 0:
                finished.append(req)
                self.running.remove(e)
        return StepResult(runtime, finished, batch=batch, items=items)

    def release(self, request: Request) -> None:
        """Free the request's KV and reservation; it will not return here."""
        if request.id in self._reservations:
            del self._reservations[request.id]
            self.kv_used -= request.kv_bytes_resident
        self._static_members.discard(request.id)

    def has_work(self) -> bool:
        if any(e.remaining > 0 for e in self.running):
            return True
        if not self.wait:
            return False
        if self.batching == BATCHING_STATIC and self._static_members:
            return False  # waiting requests blocked until the batch drains
        reserved = sum(self._reservations.values())
        return any(reserved + self._projected_kv(e.request) <= self.kv_capacity_bytes
                   for e in self.wait)

    def outstanding(self) -> int:
        return len(self.wait) + len(self.running)

    def queue_len(self) -> int:
        return len(self.wait) + len(self.running)


# ---------------------------------------------------------------------------
# Batched clients (RAG, KV retrieval)


class _ItemClient(Client):
    """Shared machinery: per-item latencies, steps service groups of items."""

    def __init__(self, client_id: int, capabilities: frozenset[StageKind],
                 concurrency: Optional[int]):
        super().__init__(client_id, capabilities)
        self.concurrency = concurrency  # None = unbounded (batched)

    def item_latency(self, request: Request) -> float:
        raise NotImplementedError

    def apply_effects(self, request: Request) -> None:
        pass

    def next_step(self, clock: float) -> Optional[StepResult]:
        if not self.wait:
            return None
        n = len(self.wait) if self.concurrency is None else \
            min(self.concurrency, len(self.wait))
        entries, self.wait = self.wait[:n], self.wait[n:]
        runtime = 0.0
        finished = []
        items = []
        for e in entries:
            lat = self.item_latency(e.request)
            if not math.isfinite(lat) or lat < 0:
                raise HardwareModelError(
                    f"client {self.id}: invalid item latency {lat}")
            runtime = max(runtime, lat)
            self.apply_effects(e.request)
            finished.append(e.request)
            items.append((e.request.id, e.request.current_stage.kind.value, 0))
        return StepResult(runtime, finished, items=items)

    def add(self, request: Request, clock: float) -> Optional[str]:
        stage = request.current_stage
        if stage.kind not in self.capabilities:
            raise AdmissionError(
                f"client {self.id} cannot serve stage {stage.kind.value}"
            )
        self.wait.append(_WorkEntry(request, stage.kind.value, 1, self._next_seq()))
        return None


@dataclass(frozen=True)
class AffineLatency:
    """latency = coeff * x + intercept, or zero when x is zero."""

    coeff: float
    intercept: float = 0.0

    def __call__(self, x: float) -> float:
        if x <= 0:
            return 0.0
        return self.coeff * x + self.intercept


class RagClient(_ItemClient):
    """Embedding, reranking, and document retrieval as one batched stage.

    Per-item latency is the sum of the three sub-steps: embedding keyed on
    query tokens, reranking keyed on documents, retrieval keyed on total
    document tokens.  Concurrent items share a step whose runtime is the
    slowest item.
    """

    def __init__(self, client_id: int,
                 embed: AffineLatency, rerank: AffineLatency,
                 retrieve: AffineLatency):
        super().__init__(client_id, frozenset({StageKind.RAG}), None)
        self.embed = embed
        self.rerank = rerank
        self.retrieve = retrieve

    def item_latency(self, request: Request) -> float:
        p = request.current_stage.params
        return (self.embed(p.query_tokens)
                + self.rerank(p.docs_retrieved)
                + self.retrieve(p.docs_retrieved * p.doc_tokens))

    def apply_effects(self, request: Request) -> None:
        p = request.current_stage.params
        request.prompt_extra_tokens += p.docs_retrieved * p.doc_tokens


class KVRetrievalClient(_ItemClient):
    """Fetches previously computed KV prefixes from a storage hierarchy.

    Modes: "expected" prices each item at the hierarchy's expected latency;
    "stochastic" samples a hit level per item; "capacity" walks the levels
    probing LRU-resident prefixes.  A resolved retrieval (hit or recompute)
    makes the prefix KV resident on the request, so the downstream prefill
    only computes the remaining new tokens.
    """

    def __init__(self, client_id: int, hierarchy: MemoryHierarchy,
                 model: ModelSpec, pricing_cluster: Optional[ClusterHandle],
                 mode: str = "expected", seed: int = 0):
        super().__init__(client_id, frozenset({StageKind.KV_RETRIEVAL}), None)
        hierarchy.validate()
        if mode not in ("expected", "stochastic", "capacity"):
            raise ConfigError(f"client {client_id}: unknown retrieval mode {mode!r}")
        if hierarchy.terminal == TERMINAL_RECOMPUTE and pricing_cluster is None:
            raise ConfigError(
                f"client {client_id}: recompute terminal needs a pricing cluster"
            )
        self.hierarchy = hierarchy
        self.model = model
        self.pricing_cluster = pricing_cluster
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self._lru = [LRUPrefixCache(lv.capacity) for lv in hierarchy.levels]

    def _recompute_cost(self, cached_tokens: int) -> float:
        if cached_tokens == 0:
            return 0.0
        return llm_step_runtime(self.pricing_cluster, self.model,
                                [cached_tokens], [])

    def item_latency(self, request: Request) -> float:
        p = request.current_stage.params
        if p.cached_tokens == 0:
            request.retrieval_outcome = "hit"
            return 0.0
        size = kv_bytes(self.model, p.cached_tokens)
        if self.mode == "expected":
            recompute = 0.0
            if self.hierarchy.terminal == TERMINAL_RECOMPUTE:
                recompute = self._recompute_cost(p.cached_tokens)
            request.retrieval_outcome = (
                "recompute" if not self.hierarchy.levels else "hit")
            return retrieval_latency(self.hierarchy, size, recompute)
        if self.mode == "stochastic":
            level = self._sample_level()
            if level == RECOMPUTE_LEVEL:
                request.retrieval_outcome = "recompute"
                return self._recompute_cost(p.cached_tokens)
            lv = self.hierarchy.levels[level]
            request.retrieval_outcome = "hit"
            return lv.lookup_latency + size / lv.bandwidth
        # capacity mode
        prefix = p.prefix_id or f"req-{request.id}"
        hit_level = None
        for i, lv in enumerate(self.hierarchy.levels):
            if lv.hit_mode == "capacity":
                if self._lru[i].probe(prefix):
                    hit_level = i
                    break
            elif self.rng.random() < lv.hit_rate:
                hit_level = i
                break
        for i in range(hit_level if hit_level is not None
                       else len(self.hierarchy.levels)):
            if self.hierarchy.levels[i].hit_mode == "capacity":
                self._lru[i].insert(prefix, size)
        if hit_level is None:
            if self.hierarchy.terminal == TERMINAL_RECOMPUTE:
                request.retrieval_outcome = "recompute"
                return self._recompute_cost(p.cached_tokens)
            hit_level = len(self.hierarchy.levels) - 1
        lv = self.hierarchy.levels[hit_level]
        request.retrieval_outcome = "hit"
        return lv.lookup_latency + size / lv.bandwidth

    def _sample_level(self) -> int:
        for i, lv in enumerate(self.hierarchy.levels):
            if self.rng.random() < lv.hit_rate:
                return i
        if self.hierarchy.terminal == TERMINAL_RECOMPUTE:
            return RECOMPUTE_LEVEL
        return len(self.hierarchy.levels) - 1

    def apply_effects(self, request: Request) -> None:
        p = request.current_stage.params
        if p.cached_tokens == 0:
            return
        request.tokens_retrieved = p.cached_tokens
        request.context_tokens += p.cached_tokens
        request.kv_bytes_resident += kv_bytes(self.model, p.cached_tokens)


class PrePostClient(_ItemClient):
    """CPU-side pre/post-processing with core-limited concurrency.

    Each step assigns up to `cores` queued tasks and lasts as long as the
    slowest of them.  Task latency depends on the op class: affine in text
    length, a fixed constant, or one forward pass of a small helper model.
    """

    def __init__(self, client_id: int, cores: int = 1,
                 linear: AffineLatency = AffineLatency(1e-6, 1e-4),
                 fixed_latency: float = 1e-3,
                 small_model: Optional[ModelSpec] = None,
                 small_cluster: Optional[ClusterHandle] = None):
        if cores < 1:
            raise ConfigError(f"client {client_id}: cores must be >= 1")
        super().__init__(
            client_id,
            frozenset({StageKind.PREPROCESS, StageKind.POSTPROCESS}),
            cores)
        self.linear = linear
        self.fixed_latency = fixed_latency
        self.small_model = small_model
        self.small_cluster = small_cluster

    def item_latency(self, request: Request) -> float:
        p = request.current_stage.params
        if p.op_class == "linear_text":
            return self.linear(p.length_tokens)
        if p.op_class == "fixed_latency":
            return self.fixed_latency
        if self.small_model is None or self.small_cluster is None:
            raise ConfigError(
                f"client {self.id}: small_model_pass needs a small model and cluster"
            )
        return llm_step_runtime(self.small_cluster, self.small_model,
                                [max(1, p.length_tokens)], [])
