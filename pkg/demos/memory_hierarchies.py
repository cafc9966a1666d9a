"""KV cache retrieval from a tiered memory hierarchy.

retrieval_latency prices fetching a cached prefix from a probe-through
hierarchy: each level hits with some probability and streams the bytes at
its own bandwidth; misses fall through to the next tier. A recompute
terminal charges the cost of regenerating the prefix when every tier misses.
"""

from stagesim import MemoryHierarchy, MemoryLevel, ModelSpec, kv_bytes, retrieval_latency
from stagesim.hardware import TERMINAL_RECOMPUTE, sample_hit_level

model = ModelSpec("llm70b", n_params=70e9, n_layers=80, n_kv_heads=8,
                  head_dim=128, hidden_dim=8192, dtype_bytes=2)
prefix_tokens = 16384
size = kv_bytes(model, prefix_tokens)
print(f"{prefix_tokens} cached tokens = {size / 1e9:.2f} GB of KV")

hbm = MemoryLevel(capacity=80e9, lookup_latency=1e-6, bandwidth=2e12, hit_rate=0.30)
dram = MemoryLevel(capacity=1e12, lookup_latency=1e-4, bandwidth=128e9, hit_rate=0.50)
ssd = MemoryLevel(capacity=32e12, lookup_latency=1e-3, bandwidth=8e9, hit_rate=1.0)

tiers = MemoryHierarchy((hbm, dram, ssd))
print(f"\nexpected retrieval over HBM/DRAM/SSD: "
      f"{retrieval_latency(tiers, size) * 1e3:.1f} ms")

# peel tiers off to see what each one buys
for drop, name in ((1, "DRAM/SSD"), (2, "SSD only")):
    sub = MemoryHierarchy(tiers.levels[drop:])
    print(f"  {name:9s} {retrieval_latency(sub, size) * 1e3:8.1f} ms")

# with a recompute terminal the hierarchy competes against re-prefilling
recompute_s = 1.85  # what a fresh prefill of the prefix would cost
flaky = MemoryHierarchy(
    (MemoryLevel(1e12, 1e-4, 128e9, hit_rate=0.6),),
    terminal=TERMINAL_RECOMPUTE)
exp = retrieval_latency(flaky, size, recompute_cost=recompute_s)
print(f"\n60% DRAM hit with recompute fallback: {exp:.3f} s expected "
      f"(recompute alone {recompute_s:.2f} s)")

# stochastic mode samples which level actually serves each request
hits = [sample_hit_level(tiers, seed) for seed in range(1000)]
for i, name in enumerate(("HBM", "DRAM", "SSD")):
    share = hits.count(i) / len(hits)
    print(f"  sampled {name} share over 1000 draws: {share:.3f}")
