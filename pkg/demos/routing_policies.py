"""Routing policies under a skewed workload.

Eight identical clients serve a stream in which one request in ten carries a
4096-token prompt and the rest are short. A heavy prefill occupies a client
for almost half a second, so any light request routed behind one eats that
delay in its TTFT. The router decides which client runs each stage; the
choice shows up directly in the light-request tail.
"""

import numpy as np

from stagesim import (
    ClusterHandle,
    Coordinator,
    LLMClient,
    LinkSpec,
    ModelSpec,
    Request,
    build_router,
    decode_stage,
    percentile,
    prefill_stage,
)
from stagesim.hardware import HardwareSKU

model = ModelSpec("default", n_params=1e9, n_layers=4, n_kv_heads=4,
                  head_dim=32, hidden_dim=128, dtype_bytes=2)
sku = HardwareSKU("toy", peak_flops=40e12, mem_bandwidth=1e12,
                  mem_capacity=1e12, intra_node_link=LinkSpec(300e9, 1e-6),
                  hourly_cost=1.0)
cluster = ClusterHandle(sku=sku, n_nodes=1)

HEAVY_TOKENS = 4096


def skewed_requests(n=400, seed=7):
    rng = np.random.default_rng(seed)
    reqs, t = [], 0.0
    for i in range(n):
        t += float(rng.exponential(1 / 30.0))
        heavy = rng.random() < 0.1
        n_in = HEAVY_TOKENS if heavy else int(rng.integers(64, 257))
        reqs.append(Request(id=i, arrival_time=t, pipeline=[
            prefill_stage(n_in), decode_stage(int(rng.integers(4, 17)))]))
    return reqs


routers = {
    "round_robin": {},
    "least_outstanding": {},
    "load_based": {"metric": "tokens_remaining"},
    "heavy_light_split": {"metric": "input_context_len", "threshold": 1024.0,
                          "heavy_pool": [0, 1]},
}

print(f"{'router':20s} {'light p50':>10s} {'light p99':>10s} "
      f"{'heavy p50':>10s} {'makespan':>9s}")
for kind, kw in routers.items():
    clients = [LLMClient(i, cluster=cluster, model=model) for i in range(8)]
    reqs = skewed_requests()
    heavy_ids = {r.id for r in reqs
                 if r.pipeline[0].params.input_tokens == HEAVY_TOKENS}
    res = Coordinator(reqs, clients, build_router(kind, **kw)).run()
    light, heavy = [], []
    for rec in res.ledger.requests.values():
        (heavy if rec.rid in heavy_ids else light).append(rec.ttft)
    print(f"{kind:20s} {percentile(light, 0.5):9.3f}s {percentile(light, 0.99):9.3f}s "
          f"{percentile(heavy, 0.5):9.3f}s {res.ledger.makespan:8.3f}s")

print("\nround_robin drops light requests behind in-flight heavy prefills, so")
print("the light p99 absorbs the ~0.4s prefill. heavy_light_split pins every")
print("4096-token prompt to clients 0-1; the light tail collapses and two")
print("dedicated clients absorb the heavy traffic without queueing.")
