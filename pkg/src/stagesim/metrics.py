"""Metrics collection and reporting.

The ledger records stage assignments, client steps, token completions, and
transfers as the engine emits them, then folds everything into a summary
report: latency percentiles (nearest-rank), goodput against an SLO,
hardware cost efficiency, and an optional Chrome trace export.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ConfigError
from .workload import Request, StageKind


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest sample."""
    if not samples:
        raise ConfigError("percentile of empty sample set")
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"percentile p must be in (0, 1], got {p}")
    ordered = sorted(samples)
    rank = int(-(-p * len(ordered) // 1))  # ceil without float drift
    return ordered[rank - 1]


@dataclass(frozen=True)
class SLOSpec:
    ttft_p50: float
    ttft_p90: float
    tbt_p99: Optional[float] = None


@dataclass
class StageRecord:
    kind: str
    client_id: Optional[int] = None
    assign_t: Optional[float] = None
    start_t: Optional[float] = None
    end_t: Optional[float] = None


@dataclass
class RequestRecord:
    rid: int
    arrival: float
    stages: list[StageRecord]
    status: str = "pending"
    reject_reason: Optional[str] = None
    completion_t: Optional[float] = None
    decode_token_ends: list[float] = field(default_factory=list)
    prefill_chunks: list[tuple[float, float, int]] = field(default_factory=list)
    transfer_s: float = 0.0
    transfer_bytes: int = 0

    @property
    def ttft(self) -> Optional[float]:
        if not self.decode_token_ends:
            return None
        return self.decode_token_ends[0] - self.arrival

    @property
    def tbt_series(self) -> list[float]:
        ends = self.decode_token_ends
        return [b - a for a, b in zip(ends, ends[1:])]

    @property
    def e2e(self) -> Optional[float]:
        if self.completion_t is None:
            return None
        return self.completion_t - self.arrival


@dataclass
class ClientStepRecord:
    client_id: int
    start_t: float
    end_t: float
    prefill_tokens: int
    decode_tokens: int
    n_items: int
    queue_len: int
    items: list[tuple[int, str, int]] = field(default_factory=list)


@dataclass
class TransferRecord:
    rid: int
    src: int
    dst: int
    bytes: int
    request_t: float
    start_t: float  # after FIFO link queueing
    ready_t: float  # when the next stage may start
    link_free_t: float


class MetricsLedger:
    """Accumulates simulation observations; engine is the sole writer."""

    def __init__(self, requests: Sequence[Request]):
        self.requests = {
            r.id: RequestRecord(
                r.id, r.arrival_time, [StageRecord(s.kind.value) for s in r.pipeline]
            )
            for r in requests
        }
        self.steps: list[ClientStepRecord] = []
        self.transfers: list[TransferRecord] = []
        self.makespan = 0.0

    # -- engine hooks --------------------------------------------------

    def stage_assigned(self, rid: int, stage_idx: int, client_id: int,
                       t: float) -> None:
        rec = self.requests[rid].stages[stage_idx]
        rec.client_id = client_id
        rec.assign_t = t

    def stage_started(self, rid: int, stage_idx: int, t: float) -> None:
        rec = self.requests[rid].stages[stage_idx]
        if rec.start_t is None:
            rec.start_t = t

    def stage_ended(self, rid: int, stage_idx: int, t: float) -> None:
        self.requests[rid].stages[stage_idx].end_t = t
        self.makespan = max(self.makespan, t)

    def client_step(self, record: ClientStepRecord) -> None:
        self.steps.append(record)
        self.makespan = max(self.makespan, record.end_t)

    def decode_token(self, rid: int, end_t: float) -> None:
        self.requests[rid].decode_token_ends.append(end_t)

    def prefill_chunk(self, rid: int, start_t: float, end_t: float,
                      tokens: int) -> None:
        self.requests[rid].prefill_chunks.append((start_t, end_t, tokens))

    def transfer(self, record: TransferRecord) -> None:
        self.transfers.append(record)
        rec = self.requests[record.rid]
        rec.transfer_s += record.ready_t - record.request_t
        rec.transfer_bytes += record.bytes

    def request_serviced(self, rid: int, t: float) -> None:
        rec = self.requests[rid]
        rec.status = "serviced"
        rec.completion_t = t
        self.makespan = max(self.makespan, t)

    def request_rejected(self, rid: int, t: float, reason: str) -> None:
        rec = self.requests[rid]
        rec.status = "rejected"
        rec.reject_reason = reason
        rec.completion_t = t


def goodput(records: Sequence[RequestRecord], slo: SLOSpec, horizon_s: float,
            mode: str = "population") -> float:
    """Requests per second that count as good under the SLO.

    Population mode is all-or-nothing: if the population's TTFT percentiles
    (and TBT P99, when set) meet the SLO, every serviced request counts,
    otherwise none do.  Per-request mode counts requests individually
    against the P90 TTFT bound.
    """
    if horizon_s <= 0:
        raise ConfigError("goodput horizon must be > 0")
    serviced = [r for r in records if r.status == "serviced"]
    ttfts = [r.ttft for r in serviced if r.ttft is not None]
    if not ttfts:
        return 0.0
    if mode == "population":
        ok = (percentile(ttfts, 0.50) <= slo.ttft_p50
              and percentile(ttfts, 0.90) <= slo.ttft_p90)
        if ok and slo.tbt_p99 is not None:
            tbts = [x for r in serviced for x in r.tbt_series]
            if tbts:
                ok = percentile(tbts, 0.99) <= slo.tbt_p99
        return len(serviced) / horizon_s if ok else 0.0
    if mode == "per_request":
        good = sum(1 for r in serviced
                   if r.ttft is not None and r.ttft <= slo.ttft_p90)
        return good / horizon_s
    raise ConfigError(f"unknown goodput mode {mode!r}")


def tokens_per_dollar(total_tokens: int, client_costs: Sequence[tuple[int, float]],
                      makespan_s: float) -> float:
    """client_costs: (n_devices, hourly_cost) per client; every client is
    billed for the full makespan."""
    hours = makespan_s / 3600.0
    dollars = sum(n * cost * hours for n, cost in client_costs)
    if dollars <= 0:
        raise ConfigError("tokens_per_dollar: total cost is zero")
    return total_tokens / dollars


def _dist(samples: list[float]) -> dict:
    if not samples:
        return {"n": 0}
    return {
        "n": len(samples),
        "mean": sum(samples) / len(samples),
        "p50": percentile(samples, 0.50),
        "p90": percentile(samples, 0.90),
        "p99": percentile(samples, 0.99),
        "max": max(samples),
    }


def build_summary(ledger: MetricsLedger, clients: Sequence, slo: Optional[SLOSpec],
                  goodput_mode: str = "population") -> dict:
    """Fold the ledger into a report dict with stable key order."""
    records = list(ledger.requests.values())
    serviced = [r for r in records if r.status == "serviced"]
    rejected = [r for r in records if r.status == "rejected"]
    ttfts = [r.ttft for r in serviced if r.ttft is not None]
    tbts = [x for r in serviced for x in r.tbt_series]
    e2es = [r.e2e for r in serviced if r.e2e is not None]
    total_decode_tokens = sum(len(r.decode_token_ends) for r in records)
    makespan = ledger.makespan

    per_client = {}
    for c in clients:
        steps = [s for s in ledger.steps if s.client_id == c.id]
        busy = sum(s.end_t - s.start_t for s in steps)
        stage_items = sum(s.n_items for s in steps)
        entry = {
            "steps": len(steps),
            "busy_s": busy,
            "busy_fraction": busy / makespan if makespan > 0 else 0.0,
            "items_serviced": stage_items,
            "service_rate_per_s": stage_items / makespan if makespan > 0 else 0.0,
            "mean_queue_len": (sum(s.queue_len for s in steps) / len(steps)
                               if steps else 0.0),
            "queue_len_series": [[s.start_t, s.queue_len] for s in steps],
            "prefill_tokens": sum(s.prefill_tokens for s in steps),
            "decode_tokens": sum(s.decode_tokens for s in steps),
        }
        cluster = getattr(c, "cluster", None)
        if cluster is not None:
            entry["n_devices"] = cluster.n_devices
            entry["hourly_cost"] = cluster.sku.hourly_cost
            if cluster.sku.tdp_watts > 0:
                entry["power_w"] = (cluster.n_devices * cluster.sku.tdp_watts
                                    * entry["busy_fraction"])
        per_client[str(c.id)] = entry

    costs = [(e.get("n_devices", 0), e.get("hourly_cost", 0.0))
             for e in per_client.values()]
    # Costless deployments (no hourly prices configured) report 0 rather
    # than failing the whole summary.
    billable = makespan > 0 and any(n * c > 0 for n, c in costs)
    summary = {
        "requests": {
            "accepted": len(records),
            "serviced": len(serviced),
            "rejected": len(rejected),
        },
        "makespan_s": makespan,
        "ttft_s": _dist(ttfts),
        "tbt_s": _dist(tbts),
        "e2e_s": _dist(e2es),
        "tokens": {
            "decoded": total_decode_tokens,
            "prefilled": sum(s.prefill_tokens for s in ledger.steps),
        },
        "communication": {
            "transfers": len(ledger.transfers),
            "bytes": sum(t.bytes for t in ledger.transfers),
            "queueing_s": sum(t.start_t - t.request_t for t in ledger.transfers),
        },
        "per_client": per_client,
        "tokens_per_dollar": tokens_per_dollar(total_decode_tokens, costs, makespan)
        if billable else 0.0,
    }
    if slo is not None and makespan > 0:
        summary["goodput_rps"] = goodput(records, slo, makespan, goodput_mode)
    return summary


# ---------------------------------------------------------------------------
# Chrome trace export

STEP_TRACK_TID = -1  # reserved lane for client step events


def _us(t: float) -> int:
    return round(t * 1e6)


def export_chrome_trace(ledger: MetricsLedger) -> dict:
    """Complete ("X") events: one per request stage and one per client step.

    Stages appear under pid=assigned client, tid=request id; steps share the
    reserved tid so each client's step lane mirrors its non-preemptive
    schedule.  Timestamps are microseconds.
    """
    events = []
    for rec in ledger.requests.values():
        for stage in rec.stages:
            if stage.start_t is None or stage.end_t is None:
                continue
            events.append({
                "name": stage.kind,
                "cat": "stage",
                "ph": "X",
                "ts": _us(stage.start_t),
                "dur": _us(stage.end_t) - _us(stage.start_t),
                "pid": stage.client_id,
                "tid": rec.rid,
                "args": {"request": rec.rid},
            })
    for step in ledger.steps:
        events.append({
            "name": "step",
            "cat": "step",
            "ph": "X",
            "ts": _us(step.start_t),
            "dur": _us(step.end_t) - _us(step.start_t),
            "pid": step.client_id,
            "tid": STEP_TRACK_TID,
            "args": {
                "prefill_tokens": step.prefill_tokens,
                "decode_tokens": step.decode_tokens,
                "items": step.n_items,
            },
        })
    events.sort(key=lambda e: (e["pid"], e["tid"], e["ts"]))
    return {"traceEvents": events, "displayTimeUnit": "ms"}


def write_request_csv(ledger: MetricsLedger, path: str) -> None:
    fields = ["rid", "arrival_s", "status", "ttft_s", "e2e_s",
              "decode_tokens", "transfer_s", "transfer_bytes", "stages"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for rec in sorted(ledger.requests.values(), key=lambda r: r.rid):
            writer.writerow([
                rec.rid, rec.arrival, rec.status,
                "" if rec.ttft is None else rec.ttft,
                "" if rec.e2e is None else rec.e2e,
                len(rec.decode_token_ends), rec.transfer_s, rec.transfer_bytes,
                ";".join(s.kind for s in rec.stages),
            ])


def write_summary_json(summary: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
