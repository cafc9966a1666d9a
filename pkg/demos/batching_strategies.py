"""Comparing batching strategies on one serving client.

Three identical requests arrive staggered; a fourth scenario injects a very
long prompt mid-decode to expose the latency trade-offs: static batching
gates admission, continuous batching preempts decodes for whole prompts,
chunked batching slices the prompt to bound the stall, and disaggregation
moves decodes out of the prefill client's way entirely.
"""

from stagesim import (
    ClusterHandle,
    Coordinator,
    LLMClient,
    LinkSpec,
    ModelSpec,
    Request,
    RoundRobinRouter,
    decode_stage,
    percentile,
    prefill_stage,
)
from stagesim.hardware import HardwareSKU

model = ModelSpec("default", n_params=1e9, n_layers=4, n_kv_heads=4,
                  head_dim=32, hidden_dim=128, dtype_bytes=2)
sku = HardwareSKU("toy", peak_flops=1e12, mem_bandwidth=1e12, mem_capacity=1e12,
                  intra_node_link=LinkSpec(300e9, 1e-6), hourly_cost=1.0)
cluster = ClusterHandle(sku=sku, n_nodes=1)


def request(rid, arrival, n_in, n_out):
    return Request(id=rid, arrival_time=arrival,
                   pipeline=[prefill_stage(n_in), decode_stage(n_out)])


def run(batching, requests, **kw):
    client = LLMClient(0, cluster=cluster, model=model, batching=batching, **kw)
    return Coordinator(requests, [client], RoundRobinRouter()).run()


def tbts(res):
    return [x for r in res.ledger.requests.values() for x in r.tbt_series]


staggered = [request(0, 0.0, 100, 50), request(1, 0.5, 100, 50),
             request(2, 0.55, 100, 50)]

print("three staggered requests, makespan:")
for batching in ("static", "continuous"):
    res = run(batching, staggered)
    print(f"  {batching:12s} {res.ledger.makespan:.3f} s "
          f"({len(res.ledger.steps)} steps)")

# now a 2000-token prompt lands while request 0 is decoding
injected = [request(0, 0.0, 100, 50), request(1, 0.5, 2000, 10)]

print("\nlong-prefill injection, decode stall (max TBT):")
for batching, kw in (("continuous", {}), ("chunked", {"chunk_size": 256})):
    res = run(batching, injected, **kw)
    print(f"  {batching:12s} max TBT {max(tbts(res)):.3f} s")

# disaggregated serving: prefill and decode on separate clients
prefill_client = LLMClient(0, cluster=cluster, model=model,
                           batching="disaggregated", role="prefill_side",
                           peer_client=1)
decode_client = LLMClient(1, cluster=cluster, model=model,
                          batching="disaggregated", role="decode_side",
                          peer_client=0)
res = Coordinator([request(0, 0.0, 100, 50), request(1, 0.5, 2000, 10)],
                  [prefill_client, decode_client], RoundRobinRouter()).run()
series = tbts(res)
print(f"  {'disaggregated':12s} max TBT {max(series):.3f} s "
      f"(P99 {percentile(series, 0.99):.3f} s)")
