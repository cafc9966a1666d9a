"""Exhaustive configuration sweeps over the serving design space.

A sweep point fixes one combination of SKU, parallelism degrees, batching
strategy (with chunk size where relevant, and a prefill/decode split for
disaggregated serving), and router.  Every point replays the same trace;
points that cannot fit the device budget are skipped and counted.  Results
are reduced by point index, so rankings are identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .clients import BATCHING_DISAGGREGATED, BATCHING_STRATEGIES, CHUNKING_STRATEGIES
from .config import run_from_config
from .errors import ConfigError
from .workload import request_from_record, request_to_record


@dataclass(frozen=True)
class SweepPoint:
    index: int
    sku: str
    tensor_parallel: int
    pipeline_parallel: int
    batching: str
    chunk_size: Optional[int]
    router: dict
    n_instances: int
    prefill_instances: int = 0
    decode_instances: int = 0

    def label(self) -> str:
        parts = [self.sku, f"tp{self.tensor_parallel}", f"pp{self.pipeline_parallel}",
                 self.batching]
        if self.chunk_size is not None:
            parts.append(f"chunk{self.chunk_size}")
        if self.batching == BATCHING_DISAGGREGATED:
            parts.append(f"{self.prefill_instances}p{self.decode_instances}d")
        parts.append(self.router.get("kind", "round_robin"))
        return "-".join(parts)


@dataclass
class SweepSpace:
    skus: list[str]
    parallelism: list[tuple[int, int]]  # (tp, pp)
    batching: list[str]
    chunk_sizes: list[int]
    routers: list[dict]
    device_budget: int
    prefill_decode_ratios: list[tuple[int, int]] = field(
        default_factory=lambda: [(1, 1)])
    objective: str = "tokens_per_dollar"  # or "goodput"

    def validate(self) -> None:
        if self.device_budget < 1:
            raise ConfigError("sweep: device_budget must be >= 1")
        if not self.skus or not self.parallelism or not self.batching:
            raise ConfigError("sweep: skus, parallelism, and batching must be non-empty")
        for b in self.batching:
            if b not in BATCHING_STRATEGIES:
                raise ConfigError(f"sweep: unknown batching {b!r}")
        if any(b in CHUNKING_STRATEGIES for b in self.batching) and not self.chunk_sizes:
            raise ConfigError("sweep: chunk_sizes required for chunked batching")
        if self.objective not in ("tokens_per_dollar", "goodput"):
            raise ConfigError(f"sweep: unknown objective {self.objective!r}")


def sweep_space_from_config(section: dict) -> SweepSpace:
    space = SweepSpace(
        skus=section.get("skus", []),
        parallelism=[tuple(p) for p in section.get("parallelism", [[1, 1]])],
        batching=section.get("batching", ["continuous"]),
        chunk_sizes=section.get("chunk_sizes", []),
        routers=section.get("routers", [{"kind": "round_robin"}]),
        device_budget=section.get("device_budget", 1),
        prefill_decode_ratios=[tuple(r) for r in
                               section.get("prefill_decode_ratios", [[1, 1]])],
        objective=section.get("objective", "tokens_per_dollar"),
    )
    space.validate()
    return space


def enumerate_points(space: SweepSpace) -> tuple[list[SweepPoint], int]:
    """Expand the cross product; returns (feasible points, infeasible count)."""
    points: list[SweepPoint] = []
    infeasible = 0
    index = 0
    for sku in space.skus:
        for tp, pp in space.parallelism:
            per_instance = tp * pp
            for batching in space.batching:
                chunks = space.chunk_sizes if batching in CHUNKING_STRATEGIES \
                    else [None]
                ratios = space.prefill_decode_ratios \
                    if batching == BATCHING_DISAGGREGATED else [(0, 0)]
                for chunk in chunks:
                    for ratio in ratios:
                        for router in space.routers:
                            index += 1
                            if batching == BATCHING_DISAGGREGATED:
                                p, d = ratio
                                n = p + d
                                if p < 1 or d < 1 \
                                        or n * per_instance > space.device_budget:
                                    infeasible += 1
                                    continue
                                points.append(SweepPoint(
                                    index, sku, tp, pp, batching, chunk,
                                    router, n, p, d))
                            else:
                                n = space.device_budget // per_instance
                                if n < 1:
                                    infeasible += 1
                                    continue
                                points.append(SweepPoint(
                                    index, sku, tp, pp, batching, chunk,
                                    router, n))
    return points, infeasible


def point_config(point: SweepPoint, base_cfg: dict) -> dict:
    """Materialize a full simulation config for one sweep point."""
    cfg = {k: v for k, v in base_cfg.items()
           if k not in ("clients", "clusters", "router", "sweep", "topology")}
    cluster_name = "sweep_cluster"
    cfg["clusters"] = {cluster_name: {
        "sku": point.sku,
        "n_nodes": point.tensor_parallel * point.pipeline_parallel,
        "tensor_parallel": point.tensor_parallel,
        "pipeline_parallel": point.pipeline_parallel,
    }}
    limits = base_cfg.get("sweep", {}).get("scheduler_limits", {})
    common = {
        "kind": "llm",
        "cluster": cluster_name,
        "model": base_cfg.get("sweep", {}).get("model", "default"),
        "max_batched_tokens": limits.get("max_batched_tokens", 4096),
        "max_batch_size": limits.get("max_batch_size", 256),
    }
    clients = []
    if point.batching == BATCHING_DISAGGREGATED:
        for i in range(point.prefill_instances):
            peer = point.prefill_instances + i % point.decode_instances
            clients.append({**common, "id": i, "batching": "disaggregated",
                            "role": "prefill_side", "peer_client": peer})
        for i in range(point.decode_instances):
            clients.append({**common, "id": point.prefill_instances + i,
                            "batching": "disaggregated", "role": "decode_side",
                            "peer_client": i % point.prefill_instances})
    else:
        for i in range(point.n_instances):
            entry = {**common, "id": i, "batching": point.batching}
            if point.chunk_size is not None:
                entry["chunk_size"] = point.chunk_size
            clients.append(entry)
    cfg["clients"] = clients
    cfg["router"] = point.router
    return cfg


def _run_point(args: tuple) -> tuple[int, dict]:
    index, cfg, trace_records = args
    requests = [request_from_record(r, i) for i, r in enumerate(trace_records)]
    result, summary = run_from_config(cfg, requests=requests)
    makespan = summary["makespan_s"]
    point_cost = sum(
        e.get("n_devices", 0) * e.get("hourly_cost", 0.0) * makespan / 3600.0
        for e in summary["per_client"].values()
    )
    return index, {
        "makespan_s": makespan,
        "goodput_rps": summary.get("goodput_rps", 0.0),
        "tokens_per_dollar": summary["tokens_per_dollar"],
        "serviced": summary["requests"]["serviced"],
        "rejected": summary["requests"]["rejected"],
        "point_cost_dollars": point_cost,
    }


def run_sweep(base_cfg: dict, workers: int = 1) -> dict:
    """Run every feasible point and rank the SLO-satisfying ones."""
    if "sweep" not in base_cfg:
        raise ConfigError("config: missing sweep section")
    space = sweep_space_from_config(base_cfg["sweep"])
    points, infeasible = enumerate_points(space)
    from .config import build_requests  # late import to avoid cycle at module load
    trace_records = [request_to_record(r)
                     for r in build_requests(base_cfg, base_cfg.get("seed", 0))]
    jobs = [(p.index, point_config(p, base_cfg), trace_records) for p in points]
    results: dict[int, dict] = {}
    if workers <= 1:
        for job in jobs:
            index, metrics = _run_point(job)
            results[index] = metrics
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, metrics in pool.map(_run_point, jobs):
                results[index] = metrics

    has_slo = "slo" in base_cfg
    rows = []
    for p in points:
        m = results[p.index]
        row = {"index": p.index, "label": p.label(), "sku": p.sku,
               "tp": p.tensor_parallel, "pp": p.pipeline_parallel,
               "batching": p.batching, "chunk_size": p.chunk_size,
               "router": p.router.get("kind", "round_robin"), **m}
        row["slo_ok"] = (not has_slo) or m["goodput_rps"] > 0.0
        rows.append(row)
    # the goodput objective ranks on the goodput_rps row metric
    metric_key = {"tokens_per_dollar": "tokens_per_dollar",
                  "goodput": "goodput_rps"}[space.objective]
    ranked = sorted(
        (r for r in rows if r["slo_ok"]),
        key=lambda r: (-r[metric_key], r["index"]),
    )
    return {
        "objective": metric_key,
        "n_points": len(points),
        "infeasible_count": infeasible,
        "slo_filtered_count": sum(1 for r in rows if not r["slo_ok"]),
        "search_cost_dollars": sum(r["point_cost_dollars"] for r in rows),
        "best": ranked[0] if ranked else None,
        "ranking": [r["index"] for r in ranked],
        "points": rows,
    }
