"""The coordinator: a discrete-event loop over stage pushes, client steps,
and inter-client transfers.

Events are ordered by (time, insertion sequence), so simultaneous events
resolve in insertion order and reruns are bit-identical.  A client never
has more than one pending step event; new work arriving while a step is in
flight waits for the step boundary.  When a stage finishes, its follow-on
stage is routed immediately, shipped over the interconnect, and re-enters
the queue as a stage push at transfer completion.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .clients import Client, LLMClient, ROLE_PREFILL
from .errors import (
    ConfigError,
    DeadlockError,
    HardwareModelError,
    RoutingError,
    SimulationError,
)
from .hardware import ClientInterconnect, ModelSpec
from .metrics import ClientStepRecord, MetricsLedger, TransferRecord
from .routing import ClientView, Router
from .workload import (
    GENERATION_STAGE_KINDS,
    LLM_STAGE_KINDS,
    Request,
    StageKind,
)

EV_STAGE_PUSH = "stage_push"
EV_CLIENT_STEP = "client_step"
EV_CLIENT_TRANSFER = "client_transfer"

TEXT_BYTES_PER_TOKEN = 4  # nominal payload for plain-text stage boundaries

GRANULARITY_FULL = "full_cache"
GRANULARITY_LAYERWISE = "layerwise"


@dataclass(frozen=True)
class TransferConfig:
    granularity: str = GRANULARITY_FULL
    # Number of pipelined slices under layerwise granularity; None means
    # one slice per model layer.
    slices: Optional[int] = None

    def validate(self) -> None:
        if self.granularity not in (GRANULARITY_FULL, GRANULARITY_LAYERWISE):
            raise ConfigError(f"unknown transfer granularity {self.granularity!r}")
        if self.slices is not None and self.slices < 1:
            raise ConfigError("transfer slices must be >= 1")


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    rid: Optional[int] = field(compare=False, default=None)
    client_id: Optional[int] = field(compare=False, default=None)
    src: Optional[int] = field(compare=False, default=None)
    dst: Optional[int] = field(compare=False, default=None)
    bytes: int = field(compare=False, default=0)


@dataclass
class SimulationResult:
    ledger: MetricsLedger
    event_log: list[dict]
    serviced: int
    rejected: int
    events_processed: int
    final_clock: float


class Coordinator:
    """Owns the event queue and drives clients until every request resolves."""

    def __init__(self, requests: Sequence[Request], clients: Sequence[Client],
                 router: Router, topology: Optional[ClientInterconnect] = None,
                 transfer: TransferConfig = TransferConfig(),
                 models: Optional[dict[str, ModelSpec]] = None):
        transfer.validate()
        ids = [c.id for c in clients]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate client ids")
        # Replays must not inherit mutated state from a previous run.
        self.requests = {r.id: r.clone() for r in requests}
        for r in self.requests.values():
            r.validate()
        self.clients = {c.id: c for c in clients}
        self.router = router
        self.topology = topology
        self.transfer = transfer
        self.models = models or {}
        self._queue: list[_Event] = []
        self._seq = 0
        self._link_free: dict[tuple[int, int], float] = {}
        self.clock = 0.0
        self.ledger = MetricsLedger(list(self.requests.values()))
        self.event_log: list[dict] = []
        self._terminated = 0
        self._events_processed = 0
        self._validate_serviceability()

    def _validate_serviceability(self) -> None:
        for r in self.requests.values():
            for s in r.pipeline:
                if not any(c.serves(r, s.kind) for c in self.clients.values()):
                    raise ConfigError(
                        f"request {r.id}: no client can serve stage "
                        f"{s.kind.value} for model {r.model_id!r}"
                    )
        for c in self.clients.values():
            if isinstance(c, LLMClient) and c.peer_client is not None:
                if c.peer_client not in self.clients:
                    raise ConfigError(
                        f"client {c.id}: peer_client {c.peer_client} does not exist"
                    )

    # -- event queue -----------------------------------------------------

    def _push(self, time: float, kind: str, **kw) -> None:
        if time < self.clock:
            raise SimulationError(
                f"event {kind} scheduled at {time} before clock {self.clock}"
            )
        self._seq += 1
        heapq.heappush(self._queue, _Event(time, self._seq, kind, **kw))

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimulationResult:
        for r in self.requests.values():
            self._push(r.arrival_time, EV_STAGE_PUSH, rid=r.id)
        accepted = len(self.requests)
        while self._terminated < accepted:
            if not self._queue:
                stuck = sorted(r.id for r in self.requests.values()
                               if r.status == "pending")
                raise DeadlockError(
                    f"event queue empty with unserviced requests {stuck}"
                )
            ev = heapq.heappop(self._queue)
            if ev.time < self.clock:
                raise SimulationError("clock went backwards")
            self.clock = ev.time
            self._events_processed += 1
            self._log_event(ev)
            if ev.kind == EV_STAGE_PUSH:
                self._handle_stage_push(ev.rid)
            elif ev.kind == EV_CLIENT_STEP:
                self._handle_client_step(ev.client_id)
            elif ev.kind == EV_CLIENT_TRANSFER:
                self._handle_client_transfer(ev)
            else:  # pragma: no cover
                raise SimulationError(f"unknown event kind {ev.kind}")
        return SimulationResult(
            ledger=self.ledger,
            event_log=self.event_log,
            serviced=sum(1 for r in self.requests.values()
                         if r.status == "serviced"),
            rejected=sum(1 for r in self.requests.values()
                         if r.status == "rejected"),
            events_processed=self._events_processed,
            final_clock=self.clock,
        )

    def _log_event(self, ev: _Event) -> None:
        rec = {"time_s": ev.time, "kind": ev.kind}
        if ev.rid is not None:
            rec["request_id"] = ev.rid
        if ev.client_id is not None:
            rec["client_id"] = ev.client_id
        if ev.kind == EV_CLIENT_TRANSFER:
            rec["client_id"] = ev.src
            rec["dst_client_id"] = ev.dst
            rec["bytes"] = ev.bytes
        self.event_log.append(rec)

    # -- handlers ----------------------------------------------------------

    def _handle_stage_push(self, rid: int) -> None:
        req = self.requests[rid]
        if req.current_stage_index >= len(req.pipeline):
            raise SimulationError(f"request {rid}: stage push past pipeline end")
        stage = req.current_stage
        if req.allotted_client is not None:
            client = self.clients[req.allotted_client]
            req.allotted_client = None
        else:
            client = self.clients[self._route(req, stage.kind)]
        if not client.serves(req, stage.kind):
            raise RoutingError(
                f"request {rid}: client {client.id} cannot serve {stage.kind.value}"
            )
        reason = client.add(req, self.clock)
        if reason is not None:
            req.status = "rejected"
            req.reject_reason = reason
            self.ledger.request_rejected(rid, self.clock, reason)
            self._terminated += 1
            return
        self.ledger.stage_assigned(rid, req.current_stage_index, client.id,
                                   self.clock)
        self.router.note_assigned(client.id, req)
        if not client.step_pending:
            client.step_pending = True
            self._push(max(self.clock, client.busy_until), EV_CLIENT_STEP,
                       client_id=client.id)

    def _route(self, req: Request, kind: StageKind) -> int:
        candidates = [c for c in self.clients.values() if c.serves(req, kind)]
        if not candidates:
            raise RoutingError(
                f"request {req.id}: no candidate for stage {kind.value}"
            )
        views = []
        locality = getattr(self.router, "locality_weight", 0.0)
        for c in sorted(candidates, key=lambda c: c.id):
            est = 0.0
            if locality and self.topology is not None and \
                    req.current_stage_index > 0:
                prev = self.ledger.requests[req.id] \
                    .stages[req.current_stage_index - 1].client_id
                if prev is not None:
                    link = self.topology.link_params(prev, c.id)
                    est = link.latency + req.kv_bytes_resident / link.bandwidth
            views.append(ClientView(c.id, c.outstanding(),
                                    self.router.load_of(c.id), est))
        return self.router.route(req, kind, views)

    def _handle_client_step(self, client_id: int) -> None:
        client = self.clients[client_id]
        client.step_pending = False
        queue_len = client.queue_len()
        step = client.next_step(self.clock)
        if step is None:
            return  # nothing runnable; a future stage push wakes the client
        dt = step.runtime
        if not (math.isfinite(dt) and dt >= 0.0):
            raise HardwareModelError(
                f"client {client_id}: invalid step runtime {dt}"
            )
        t_end = self.clock + dt
        client.busy_until = t_end
        prefill_tokens = decode_tokens = 0
        for rid, kind, tokens in step.items:
            req = self.requests[rid]
            idx = req.current_stage_index
            self.ledger.stage_started(rid, idx, self.clock)
            if kind == "prefill":
                prefill_tokens += tokens
                self.ledger.prefill_chunk(rid, self.clock, t_end, tokens)
            elif kind == "decode":
                decode_tokens += 1
                self.ledger.decode_token(rid, t_end)
        self.ledger.client_step(ClientStepRecord(
            client_id=client_id, start_t=self.clock, end_t=t_end,
            prefill_tokens=prefill_tokens, decode_tokens=decode_tokens,
            n_items=len(step.items), queue_len=queue_len, items=step.items,
        ))
        # Finished stages push their successors before the follow-up step is
        # queued, so a zero-latency same-client transition can join the very
        # next batch.
        for req in step.finished:
            self._finish_stage(req, client, t_end)
        if client.has_work() and not client.step_pending:
            client.step_pending = True
            self._push(t_end, EV_CLIENT_STEP, client_id=client_id)

    def _finish_stage(self, req: Request, src: Client, t_end: float) -> None:
        idx = req.current_stage_index
        prev_kind = req.pipeline[idx].kind
        self.ledger.stage_ended(req.id, idx, t_end)
        self.router.note_departed(src.id, req)
        req.current_stage_index += 1
        if req.current_stage_index >= len(req.pipeline):
            req.status = "serviced"
            self.ledger.request_serviced(req.id, t_end)
            src.release(req)
            self._terminated += 1
            return
        next_kind = req.current_stage.kind
        dst_id = self._pick_next_client(req, src, next_kind)
        req.allotted_client = dst_id
        if dst_id == src.id:
            self._push(t_end, EV_STAGE_PUSH, rid=req.id)
            return
        payload = self._payload_bytes(req, prev_kind, next_kind)
        src.release(req)
        self._push(t_end, EV_CLIENT_TRANSFER, rid=req.id,
                   src=src.id, dst=dst_id, bytes=payload)

    def _pick_next_client(self, req: Request, src: Client,
                          next_kind: StageKind) -> int:
        # Disaggregated pairing pre-pins generation to the peer client.
        if (isinstance(src, LLMClient) and src.role == ROLE_PREFILL
                and next_kind in GENERATION_STAGE_KINDS):
            peer = self.clients[src.peer_client]
            if not peer.serves(req, next_kind):
                raise RoutingError(
                    f"request {req.id}: peer client {peer.id} cannot serve "
                    f"{next_kind.value}"
                )
            return peer.id
        return self._route(req, next_kind)

    def _payload_bytes(self, req: Request, prev_kind: StageKind,
                       next_kind: StageKind) -> int:
        """Bytes that must move with the request across this boundary.

        KV-bearing boundaries ship the resident cache; a recompute outcome
        ships nothing because the prefix is regenerated at the destination.
        Plain-text boundaries carry a nominal 4 bytes per token.
        """
        prefill = req.stage_of_kind(StageKind.PREFILL)
        prompt = (prefill.params.input_tokens if prefill else 0) \
            + req.prompt_extra_tokens
        if next_kind in LLM_STAGE_KINDS:
            if prev_kind is StageKind.KV_RETRIEVAL:
                if req.retrieval_outcome == "recompute":
                    return 0
                return req.kv_bytes_resident
            if prev_kind in LLM_STAGE_KINDS:
                return req.kv_bytes_resident
            return req.kv_bytes_resident + TEXT_BYTES_PER_TOKEN * prompt
        if prev_kind in GENERATION_STAGE_KINDS:
            return TEXT_BYTES_PER_TOKEN * req.tokens_decoded
        return TEXT_BYTES_PER_TOKEN * prompt

    def _handle_client_transfer(self, ev: _Event) -> None:
        """FIFO per directed link: a busy link queues the transfer and the
        queueing delay is recorded."""
        if self.topology is None:
            link = None
        else:
            link = self.topology.link_params(ev.src, ev.dst)
        if link is None or ev.bytes == 0:
            ready = self.clock
            start = self.clock
            free_t = self.clock
        else:
            key = (ev.src, ev.dst)
            start = max(self.clock, self._link_free.get(key, 0.0))
            full = start + link.latency + ev.bytes / link.bandwidth
            if self.transfer.granularity == GRANULARITY_LAYERWISE:
                slices = self.transfer.slices
                if slices is None:
                    model = self.models.get(self.requests[ev.rid].model_id)
                    slices = model.n_layers if model is not None else 1
                ready = start + link.latency + ev.bytes / (slices * link.bandwidth)
            else:
                ready = full
            self._link_free[key] = full
            free_t = full
        self.ledger.transfer(TransferRecord(
            rid=ev.rid, src=ev.src, dst=ev.dst, bytes=ev.bytes,
            request_t=self.clock, start_t=start, ready_t=ready,
            link_free_t=free_t,
        ))
        self._push(ready, EV_STAGE_PUSH, rid=ev.rid)
