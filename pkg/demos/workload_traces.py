"""Generating synthetic request traces.

A trace is a list of requests, each carrying an arrival time and a pipeline
of stages. The generator draws prompt/output sizes from a truncated normal
model and arrival gaps from a pluggable arrival process.
"""

from stagesim import (
    StageKind,
    StageSpec,
    TraceConfig,
    decode_stage,
    generate_trace,
    prefill_stage,
    save_trace,
)
from stagesim.workload import (
    BurstyArrival,
    KVRetrievalParams,
    NormalSizeModel,
    PoissonArrival,
)

sizes = NormalSizeModel(mean_in=512, var_in=120**2, mean_out=64, var_out=15**2)

# Poisson arrivals at 20 requests/s
trace = generate_trace(TraceConfig(8, sizes, PoissonArrival(20.0), seed=1))
print("poisson arrivals:")
for r in trace:
    prefill, decode = r.pipeline
    print(f"  t={r.arrival_time:7.4f}s  prompt={prefill.params.input_tokens:4d} "
          f"tokens  output={decode.params.output_tokens}")

# bursty arrivals deliver whole batches at once
burst = generate_trace(TraceConfig(8, sizes, BurstyArrival(20.0, burst_size=4),
                                   seed=1))
print("\nbursty arrivals (batches of 4):")
print(" ", [round(r.arrival_time, 4) for r in burst])

# a stage template turns every request into a longer pipeline; prefill and
# decode sizes are still drawn per request, the rest is copied verbatim
template = (
    StageSpec(StageKind.KV_RETRIEVAL, KVRetrievalParams(cached_tokens=256)),
    prefill_stage(1),
    decode_stage(1),
)
rich = generate_trace(TraceConfig(3, sizes, PoissonArrival(20.0), seed=2,
                                  stages=template))
print("\ntemplated pipelines:")
for r in rich:
    print(" ", " -> ".join(s.kind.value for s in r.pipeline))

# traces round-trip through JSONL files for replay across experiments
save_trace(rich, "/tmp/stagesim_demo_trace.jsonl")
print("\nwrote /tmp/stagesim_demo_trace.jsonl")
