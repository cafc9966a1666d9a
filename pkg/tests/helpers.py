"""Shared builders used across the test modules."""

import itertools

from stagesim import (
    ClusterHandle,
    HardwareSKU,
    LinkSpec,
    ModelSpec,
    Request,
    StageKind,
    StageSpec,
    decode_stage,
    prefill_stage,
)
from stagesim.workload import KVRetrievalParams


def small_model(name="default", **overrides):
    """A 1B-parameter toy model whose KV cache costs 2048 bytes per token."""
    fields = dict(name=name, n_params=1e9, n_layers=4, n_kv_heads=4,
                  head_dim=32, hidden_dim=128, dtype_bytes=2)
    fields.update(overrides)
    return ModelSpec(**fields)


def small_sku(name="dev", **overrides):
    # With small_model on one device this gives a step cost of
    # 0.004 * total_tokens + 0.001 while the batch stays compute bound.
    fields = dict(name=name, peak_flops=1e12, mem_bandwidth=1e12,
                  mem_capacity=1e12, intra_node_link=LinkSpec(300e9, 1e-6),
                  hourly_cost=1.0)
    fields.update(overrides)
    return HardwareSKU(**fields)


def small_cluster(sku=None, **overrides):
    fields = dict(n_nodes=1)
    fields.update(overrides)
    return ClusterHandle(sku=sku or small_sku(), **fields)


def step_runtime_s(total_tokens):
    """Closed form of the small_model/small_sku step cost (compute bound)."""
    return 0.004 * total_tokens + 1e-3


def pd_request(rid, arrival, n_in, n_out):
    return Request(id=rid, arrival_time=arrival,
                   pipeline=[prefill_stage(n_in), decode_stage(n_out)])


def kv_request(rid, arrival, cached, n_in, n_out):
    return Request(id=rid, arrival_time=arrival, pipeline=[
        StageSpec(StageKind.KV_RETRIEVAL, KVRetrievalParams(cached_tokens=cached)),
        prefill_stage(n_in),
        decode_stage(n_out),
    ])


def step_shapes(ledger, client_id=None):
    """Batch compositions per step: (set of (rid, chunk) prefills, set of decode rids)."""
    shapes = []
    for s in ledger.steps:
        if client_id is not None and s.client_id != client_id:
            continue
        pre = frozenset((rid, tok) for rid, kind, tok in s.items if kind == "prefill")
        dec = frozenset(rid for rid, kind, tok in s.items if kind == "decode")
        shapes.append((pre, dec))
    return shapes


def brute_force_retrieval_expectation(levels, size_bytes, terminal,
                                      recompute_cost=0.0):
    """Expected retrieval latency by enumerating every hit/miss outcome.

    ``levels`` is a sequence of (hit_rate, lookup_latency, bandwidth) tuples
    ordered nearest first. Each outcome vector is priced at the first level
    that hits; an all-miss outcome costs the recompute penalty when the
    hierarchy falls back to recomputation and is impossible (probability 0)
    when the last level is a guaranteed hit.
    """
    expected = 0.0
    for outcome in itertools.product((True, False), repeat=len(levels)):
        prob = 1.0
        for (hit_rate, _, _), hit in zip(levels, outcome):
            prob *= hit_rate if hit else (1.0 - hit_rate)
        if prob == 0.0:
            continue
        cost = None
        for (_, lookup, bandwidth), hit in zip(levels, outcome):
            if hit:
                cost = lookup + size_bytes / bandwidth
                break
        if cost is None:
            cost = recompute_cost if terminal == "recompute" else 0.0
        expected += prob * cost
    return expected
