"""Build simulations from hierarchical key/value config documents.

The document mirrors the constructor field names of the objects it builds:
a trace section (synthetic generator fields or a trace file), model and SKU
definitions, clusters, storage hierarchies, clients, a router, an optional
topology/transfer/SLO block.  Errors name the offending key path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import yaml

from .clients import (
    AffineLatency,
    Client,
    KVRetrievalClient,
    LLMClient,
    PrePostClient,
    RagClient,
)
from .engine import Coordinator, SimulationResult, TransferConfig
from .errors import ConfigError
from .hardware import (
    ClientInterconnect,
    ClusterHandle,
    EmpiricalTable,
    HardwareSKU,
    LinkSpec,
    MemoryHierarchy,
    MemoryLevel,
    ModelSpec,
    Placement,
    single_site_topology,
)
from .metrics import MetricsLedger, SLOSpec, build_summary
from .routing import Router, build_router
from .workload import (
    BurstyArrival,
    NormalArrival,
    NormalSizeModel,
    PoissonArrival,
    Request,
    TraceConfig,
    UniformArrival,
    generate_trace,
    load_trace,
    stage_from_dict,
)


def load_config(path: str) -> dict:
    try:
        fh = open(path)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    with fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config document must be a mapping")
    return cfg


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return section[key]


def build_trace_config(section: dict, default_seed: int) -> TraceConfig:
    sm = _require(section, "size_model", "trace")
    if sm.get("kind", "normal") != "normal":
        raise ConfigError(f"trace.size_model: unknown kind {sm.get('kind')!r}")
    size_model = NormalSizeModel(
        mean_in=_require(sm, "mean_in", "trace.size_model"),
        var_in=_require(sm, "var_in", "trace.size_model"),
        mean_out=_require(sm, "mean_out", "trace.size_model"),
        var_out=_require(sm, "var_out", "trace.size_model"),
    )
    am = _require(section, "arrival_model", "trace")
    kind = _require(am, "kind", "trace.arrival_model")
    if kind == "uniform":
        arrival = UniformArrival(rate=_require(am, "rate", "trace.arrival_model"))
    elif kind == "poisson":
        arrival = PoissonArrival(rate=_require(am, "rate", "trace.arrival_model"))
    elif kind == "normal":
        arrival = NormalArrival(rate=_require(am, "rate", "trace.arrival_model"),
                                var=_require(am, "var", "trace.arrival_model"))
    elif kind == "bursty":
        arrival = BurstyArrival(rate=_require(am, "rate", "trace.arrival_model"),
                                burst_size=_require(am, "burst_size",
                                                    "trace.arrival_model"),
                                burst_gap=am.get("burst_gap"))
    else:
        raise ConfigError(f"trace.arrival_model: unknown kind {kind!r}")
    stages = None
    if "stages" in section:
        stages = tuple(stage_from_dict(s) for s in section["stages"])
    return TraceConfig(
        num_requests=_require(section, "num_requests", "trace"),
        size_model=size_model,
        arrival_model=arrival,
        seed=section.get("seed", default_seed),
        stages=stages,
    )


def build_requests(cfg: dict, seed: int) -> list[Request]:
    section = _require(cfg, "trace", "config")
    if "file" in section:
        return load_trace(section["file"], section.get("format", "jsonl"))
    return generate_trace(build_trace_config(section, seed))


def _build_link(d: dict, where: str) -> LinkSpec:
    return LinkSpec(bandwidth=_require(d, "bandwidth", where),
                    latency=_require(d, "latency", where))


def build_models(cfg: dict) -> dict[str, ModelSpec]:
    models = {}
    for name, d in cfg.get("models", {}).items():
        where = f"models.{name}"
        spec = ModelSpec(
            name=name,
            n_params=_require(d, "n_params", where),
            n_layers=_require(d, "n_layers", where),
            n_kv_heads=_require(d, "n_kv_heads", where),
            head_dim=_require(d, "head_dim", where),
            hidden_dim=_require(d, "hidden_dim", where),
            dtype_bytes=d.get("dtype_bytes", 2),
        )
        spec.validate()
        models[name] = spec
    return models


def build_skus(cfg: dict) -> dict[str, HardwareSKU]:
    skus = {}
    for name, d in cfg.get("skus", {}).items():
        where = f"skus.{name}"
        sku = HardwareSKU(
            name=name,
            peak_flops=_require(d, "peak_flops", where),
            mem_bandwidth=_require(d, "mem_bandwidth", where),
            mem_capacity=_require(d, "mem_capacity", where),
            intra_node_link=_build_link(_require(d, "intra_node_link", where),
                                        where + ".intra_node_link"),
            hourly_cost=d.get("hourly_cost", 0.0),
            flops_efficiency=d.get("flops_efficiency", 0.5),
            bw_efficiency=d.get("bw_efficiency", 0.8),
            fixed_step_overhead=d.get("fixed_step_overhead", 1e-3),
            tdp_watts=d.get("tdp_watts", 0.0),
        )
        sku.validate()
        skus[name] = sku
    return skus


def build_clusters(cfg: dict, skus: dict[str, HardwareSKU]) -> dict[str, ClusterHandle]:
    clusters = {}
    for name, d in cfg.get("clusters", {}).items():
        where = f"clusters.{name}"
        sku_name = _require(d, "sku", where)
        if sku_name not in skus:
            raise ConfigError(f"{where}: unknown sku {sku_name!r}")
        table = None
        if "empirical_table" in d:
            table = EmpiricalTable.load(d["empirical_table"])
        cluster = ClusterHandle(
            sku=skus[sku_name],
            n_nodes=_require(d, "n_nodes", where),
            tensor_parallel=d.get("tensor_parallel", 1),
            pipeline_parallel=d.get("pipeline_parallel", 1),
            devices_per_node=d.get("devices_per_node", 1),
            empirical_table=table,
        )
        cluster.validate()
        clusters[name] = cluster
    return clusters


def build_hierarchies(cfg: dict) -> dict[str, MemoryHierarchy]:
    out = {}
    for name, d in cfg.get("hierarchies", {}).items():
        where = f"hierarchies.{name}"
        levels = []
        for i, lv in enumerate(d.get("levels", [])):
            lw = f"{where}.levels[{i}]"
            levels.append(MemoryLevel(
                capacity=_require(lv, "capacity", lw),
                lookup_latency=_require(lv, "lookup_latency", lw),
                bandwidth=_require(lv, "bandwidth", lw),
                hit_rate=lv.get("hit_rate", 1.0),
                hit_mode=lv.get("hit_mode", "fixed"),
            ))
        hierarchy = MemoryHierarchy(levels=tuple(levels),
                                    terminal=d.get("terminal", "assume_hit"))
        hierarchy.validate()
        out[name] = hierarchy
    return out


def _affine(d: Optional[dict], default: AffineLatency) -> AffineLatency:
    if d is None:
        return default
    return AffineLatency(coeff=d.get("coeff", 0.0),
                         intercept=d.get("intercept", 0.0))


def build_clients(cfg: dict, models: dict[str, ModelSpec],
                  clusters: dict[str, ClusterHandle],
                  hierarchies: dict[str, MemoryHierarchy]) -> list[Client]:
    clients: list[Client] = []
    entries = _require(cfg, "clients", "config")
    if not entries:
        raise ConfigError("config: clients list is empty")
    for i, d in enumerate(entries):
        where = f"clients[{i}]"
        cid = _require(d, "id", where)
        kind = _require(d, "kind", where)
        if kind == "llm":
            cluster_name = _require(d, "cluster", where)
            if cluster_name not in clusters:
                raise ConfigError(f"{where}: unknown cluster {cluster_name!r}")
            model_name = d.get("model", "default")
            if model_name not in models:
                raise ConfigError(f"{where}: unknown model {model_name!r}")
            clients.append(LLMClient(
                client_id=cid,
                cluster=clusters[cluster_name],
                model=models[model_name],
                batching=d.get("batching", "continuous"),
                packing=d.get("packing", "fcfs"),
                max_batched_tokens=d.get("max_batched_tokens", 4096),
                max_batch_size=d.get("max_batch_size", 256),
                chunk_size=d.get("chunk_size", 512),
                kv_capacity_bytes=d.get("kv_capacity_bytes"),
                role=d.get("role"),
                peer_client=d.get("peer_client"),
            ))
        elif kind == "rag":
            clients.append(RagClient(
                client_id=cid,
                embed=_affine(d.get("embed"), AffineLatency(1e-5, 1e-3)),
                rerank=_affine(d.get("rerank"), AffineLatency(1e-4, 1e-3)),
                retrieve=_affine(d.get("retrieve"), AffineLatency(1e-6, 1e-3)),
            ))
        elif kind == "kv_retrieval":
            h_name = _require(d, "hierarchy", where)
            if h_name not in hierarchies:
                raise ConfigError(f"{where}: unknown hierarchy {h_name!r}")
            model_name = d.get("model", "default")
            if model_name not in models:
                raise ConfigError(f"{where}: unknown model {model_name!r}")
            pricing = None
            if "pricing_cluster" in d:
                pc = d["pricing_cluster"]
                if pc not in clusters:
                    raise ConfigError(f"{where}: unknown cluster {pc!r}")
                pricing = clusters[pc]
            clients.append(KVRetrievalClient(
                client_id=cid,
                hierarchy=hierarchies[h_name],
                model=models[model_name],
                pricing_cluster=pricing,
                mode=d.get("mode", "expected"),
                seed=d.get("seed", 0),
            ))
        elif kind == "prepost":
            small_model = None
            small_cluster = None
            if "small_model" in d:
                sm = d["small_model"]
                if sm not in models:
                    raise ConfigError(f"{where}: unknown model {sm!r}")
                small_model = models[sm]
            if "small_cluster" in d:
                sc = d["small_cluster"]
                if sc not in clusters:
                    raise ConfigError(f"{where}: unknown cluster {sc!r}")
                small_cluster = clusters[sc]
            clients.append(PrePostClient(
                client_id=cid,
                cores=d.get("cores", 1),
                linear=_affine(d.get("linear"), AffineLatency(1e-6, 1e-4)),
                fixed_latency=d.get("fixed_latency", 1e-3),
                small_model=small_model,
                small_cluster=small_cluster,
            ))
        else:
            raise ConfigError(f"{where}: unknown client kind {kind!r}")
    return clients


def build_topology(cfg: dict, clients: list[Client]) -> ClientInterconnect:
    section = cfg.get("topology")
    if section is None:
        return single_site_topology([c.id for c in clients])
    placements = {}
    for cid, p in _require(section, "placements", "topology").items():
        placements[int(cid)] = Placement(
            platform=_require(p, "platform", f"topology.placements.{cid}"),
            rack=_require(p, "rack", f"topology.placements.{cid}"),
        )
    for c in clients:
        if c.id not in placements:
            raise ConfigError(f"topology.placements: missing client {c.id}")
    links = {}
    for name, d in _require(section, "links", "topology").items():
        links[name] = _build_link(d, f"topology.links.{name}")
    topo = ClientInterconnect(placements=placements, links=links)
    topo.validate()
    return topo


def build_router_from_config(cfg: dict) -> Router:
    section = cfg.get("router", {"kind": "round_robin"})
    return build_router(
        kind=section.get("kind", "round_robin"),
        metric=section.get("metric"),
        threshold=section.get("threshold"),
        heavy_pool=section.get("heavy_pool"),
        locality_weight=section.get("locality_weight", 0.0),
    )


def build_slo(cfg: dict) -> Optional[SLOSpec]:
    section = cfg.get("slo")
    if section is None:
        return None
    return SLOSpec(
        ttft_p50=_require(section, "ttft_p50", "slo"),
        ttft_p90=_require(section, "ttft_p90", "slo"),
        tbt_p99=section.get("tbt_p99"),
    )


@dataclass
class SimulationSetup:
    requests: list[Request]
    clients: list[Client]
    router: Router
    topology: ClientInterconnect
    transfer: TransferConfig
    models: dict[str, ModelSpec]
    slo: Optional[SLOSpec]
    goodput_mode: str
    seed: int


def build_simulation(cfg: dict,
                     requests: Optional[list[Request]] = None) -> SimulationSetup:
    seed = cfg.get("seed", 0)
    models = build_models(cfg)
    skus = build_skus(cfg)
    clusters = build_clusters(cfg, skus)
    hierarchies = build_hierarchies(cfg)
    clients = build_clients(cfg, models, clusters, hierarchies)
    transfer_section = cfg.get("transfer", {})
    transfer = TransferConfig(
        granularity=transfer_section.get("granularity", "full_cache"),
        slices=transfer_section.get("slices"),
    )
    transfer.validate()
    return SimulationSetup(
        requests=build_requests(cfg, seed) if requests is None else requests,
        clients=clients,
        router=build_router_from_config(cfg),
        topology=build_topology(cfg, clients),
        transfer=transfer,
        models=models,
        slo=build_slo(cfg),
        goodput_mode=cfg.get("goodput_mode", "population"),
        seed=seed,
    )


def run_from_config(cfg: dict,
                    requests: Optional[list[Request]] = None
                    ) -> tuple[SimulationResult, dict]:
    """Build, run, and summarize a simulation in one call."""
    setup = build_simulation(cfg, requests=requests)
    coordinator = Coordinator(
        requests=setup.requests,
        clients=setup.clients,
        router=setup.router,
        topology=setup.topology,
        transfer=setup.transfer,
        models=setup.models,
    )
    result = coordinator.run()
    summary = build_summary(result.ledger, setup.clients, setup.slo,
                            setup.goodput_mode)
    return result, summary
