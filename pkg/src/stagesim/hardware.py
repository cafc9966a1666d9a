"""Hardware models: device SKUs, LLM step runtimes, memory hierarchies, links.

Runtimes come from one of two sources.  The analytical source is a roofline
model over per-device peak FLOPs and memory bandwidth with explicit
tensor-parallel communication and pipeline-parallel bubble terms.  The
empirical source interpolates a table of measured step times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError, ExtrapolationError, HardwareModelError


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: float  # bytes per second
    latency: float  # seconds


@dataclass(frozen=True)
class HardwareSKU:
    name: str
    peak_flops: float  # per device
    mem_bandwidth: float  # bytes/s per device
    mem_capacity: float  # bytes per device
    intra_node_link: LinkSpec
    hourly_cost: float = 0.0  # dollars per device-hour
    flops_efficiency: float = 0.5  # calibration placeholder, not measured
    bw_efficiency: float = 0.8  # calibration placeholder, not measured
    fixed_step_overhead: float = 1e-3  # seconds per step (kernel launch etc.)
    tdp_watts: float = 0.0

    def validate(self) -> None:
        for name in ("peak_flops", "mem_bandwidth", "mem_capacity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"sku {self.name}: {name} must be > 0")
        if not (0 < self.flops_efficiency <= 1) or not (0 < self.bw_efficiency <= 1):
            raise ConfigError(f"sku {self.name}: efficiencies must be in (0, 1]")
        if self.fixed_step_overhead <= 0:
            raise ConfigError(f"sku {self.name}: fixed_step_overhead must be > 0")
        if self.intra_node_link.bandwidth <= 0 or self.intra_node_link.latency < 0:
            raise ConfigError(f"sku {self.name}: invalid intra_node_link")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_params: float
    n_layers: int
    n_kv_heads: int
    head_dim: int
    hidden_dim: int
    dtype_bytes: int = 2

    def validate(self) -> None:
        for name in ("n_params", "n_layers", "n_kv_heads", "head_dim",
                     "hidden_dim", "dtype_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model {self.name}: {name} must be > 0")

    @property
    def weight_bytes(self) -> float:
        return self.n_params * self.dtype_bytes


def kv_bytes(model: ModelSpec, tokens: int) -> int:
    """KV-cache footprint of `tokens` tokens: one K and one V vector per
    layer per KV head."""
    if tokens < 0:
        raise HardwareModelError("kv_bytes: tokens must be >= 0")
    return int(
        2 * model.n_layers * model.n_kv_heads * model.head_dim
        * model.dtype_bytes * tokens
    )


# ---------------------------------------------------------------------------
# Empirical runtime tables

_TABLE_FIELDS = ("model", "sku", "tp", "pp", "phase",
                 "total_tokens", "batch_size", "max_context", "runtime_s")


class EmpiricalTable:
    """Measured step runtimes keyed on (model, sku, tp, pp, phase).

    Within a group, runtimes form a grid over (total_tokens, batch_size,
    max_context) and are multilinearly interpolated.  An exact key match
    returns the stored value bit-for-bit; queries outside the measured grid
    raise ExtrapolationError.
    """

    def __init__(self, records: Sequence[dict]):
        self._exact: dict[tuple, float] = {}
        self._groups: dict[tuple, dict] = {}
        by_group: dict[tuple, list] = {}
        for i, rec in enumerate(records):
            missing = [f for f in _TABLE_FIELDS if f not in rec]
            if missing:
                raise ConfigError(f"table record {i}: missing field(s) {missing}")
            g = (rec["model"], rec["sku"], int(rec["tp"]), int(rec["pp"]), rec["phase"])
            key = (float(rec["total_tokens"]), float(rec["batch_size"]),
                   float(rec["max_context"]))
            runtime = float(rec["runtime_s"])
            if runtime <= 0 or not math.isfinite(runtime):
                raise ConfigError(f"table record {i}: runtime_s must be positive")
            self._exact[g + key] = runtime
            by_group.setdefault(g, []).append((key, runtime))
        for g, rows in by_group.items():
            axes = [sorted({k[d] for k, _ in rows}) for d in range(3)]
            shape = tuple(len(a) for a in axes)
            expected = shape[0] * shape[1] * shape[2]
            if len(rows) != expected or len({k for k, _ in rows}) != len(rows):
                raise ConfigError(
                    f"table group {g}: records must form a complete grid over "
                    f"(total_tokens, batch_size, max_context)"
                )
            if any(len(a) < 2 for a in axes):
                # A degenerate axis leaves nothing to interpolate along;
                # exact-key lookups still work for this group.
                continue
            values = np.empty(shape)
            index = [{v: i for i, v in enumerate(a)} for a in axes]
            for key, runtime in rows:
                values[index[0][key[0]], index[1][key[1]], index[2][key[2]]] = runtime
            self._groups[g] = RegularGridInterpolator(
                [np.asarray(a) for a in axes], values, method="linear",
                bounds_error=True,
            )

    @classmethod
    def load(cls, path: str) -> "EmpiricalTable":
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ConfigError(f"{path}:{lineno}: invalid JSON ({e})") from None
        return cls(records)

    def lookup(self, model: str, sku: str, tp: int, pp: int, phase: str,
               total_tokens: int, batch_size: int, max_context: int) -> float:
        g = (model, sku, tp, pp, phase)
        key = g + (float(total_tokens), float(batch_size), float(max_context))
        if key in self._exact:
            return self._exact[key]
        interp = self._groups.get(g)
        if interp is None:
            raise ExtrapolationError(
                f"no interpolable table entries for group {g}"
            )
        try:
            return float(interp([total_tokens, batch_size, max_context])[0])
        except ValueError:
            raise ExtrapolationError(
                f"query outside measured grid for group {g}: "
                f"(total_tokens={total_tokens}, batch_size={batch_size}, "
                f"max_context={max_context})"
            ) from None


@dataclass
class ClusterHandle:
    """A homogeneous pool of devices allotted to one client."""

    sku: HardwareSKU
    n_nodes: int
    tensor_parallel: int = 1
    pipeline_parallel: int = 1
    devices_per_node: int = 1
    empirical_table: Optional[EmpiricalTable] = None

    def validate(self) -> None:
        self.sku.validate()
        if self.n_nodes < 1 or self.devices_per_node < 1:
            raise ConfigError("cluster: n_nodes and devices_per_node must be >= 1")
        if self.tensor_parallel < 1 or self.pipeline_parallel < 1:
            raise ConfigError("cluster: parallelism degrees must be >= 1")
        if self.tensor_parallel * self.pipeline_parallel > self.n_devices:
            raise ConfigError(
                "cluster: tensor_parallel * pipeline_parallel exceeds device count"
            )

    @property
    def n_devices(self) -> int:
        return self.n_nodes * self.devices_per_node


def llm_step_runtime(cluster: ClusterHandle, model: ModelSpec,
                     prefill_tokens: Sequence[int],
                     decode_context_lens: Sequence[int]) -> float:
    """Runtime of one batched LLM step.

    prefill_tokens holds the chunk size of each prefill item; each decode
    item contributes one generated token and its current context length
    (used to price KV reads).
    """
    total_tokens = int(sum(prefill_tokens)) + len(decode_context_lens)
    if total_tokens <= 0:
        raise HardwareModelError("llm_step_runtime: empty step")
    if cluster.empirical_table is not None:
        return _empirical_step_runtime(cluster, model, prefill_tokens,
                                       decode_context_lens)
    sku = cluster.sku
    tp = cluster.tensor_parallel
    pp = cluster.pipeline_parallel

    compute_time = (2.0 * model.n_params * total_tokens
                    / (sku.peak_flops * sku.flops_efficiency * tp))
    kv_read_bytes = sum(kv_bytes(model, c) for c in decode_context_lens)
    memory_time = ((model.weight_bytes / tp + kv_read_bytes / tp)
                   / (sku.mem_bandwidth * sku.bw_efficiency))
    comm_time = 0.0
    if tp > 1:
        activation_bytes = total_tokens * model.hidden_dim * model.dtype_bytes
        comm_time = (2.0 * (tp - 1) / tp * activation_bytes * model.n_layers
                     / sku.intra_node_link.bandwidth)
    base = max(compute_time, memory_time) + comm_time
    # Pipeline stages run the pass sequentially and idle through pp-1 bubble
    # micro-steps of one stage each.
    step = base * (2 * pp - 1) / pp + sku.fixed_step_overhead
    if not math.isfinite(step) or step < 0:
        raise HardwareModelError(f"llm_step_runtime: invalid runtime {step}")
    return step


def _empirical_step_runtime(cluster: ClusterHandle, model: ModelSpec,
                            prefill_tokens: Sequence[int],
                            decode_context_lens: Sequence[int]) -> float:
    table = cluster.empirical_table
    tp, pp = cluster.tensor_parallel, cluster.pipeline_parallel
    runtime = 0.0
    if prefill_tokens:
        runtime += table.lookup(
            model.name, cluster.sku.name, tp, pp, "prefill",
            total_tokens=int(sum(prefill_tokens)),
            batch_size=len(prefill_tokens),
            max_context=int(max(prefill_tokens)),
        )
    if decode_context_lens:
        runtime += table.lookup(
            model.name, cluster.sku.name, tp, pp, "decode",
            total_tokens=len(decode_context_lens),
            batch_size=len(decode_context_lens),
            max_context=int(max(decode_context_lens)),
        )
    if not math.isfinite(runtime) or runtime < 0:
        raise HardwareModelError(f"llm_step_runtime: invalid runtime {runtime}")
    return runtime


# ---------------------------------------------------------------------------
# KV storage hierarchies

TERMINAL_ASSUME_HIT = "assume_hit"
TERMINAL_RECOMPUTE = "recompute"
RECOMPUTE_LEVEL = -1  # sentinel returned by sample_hit_level


@dataclass(frozen=True)
class MemoryLevel:
    capacity: float  # bytes
    lookup_latency: float  # seconds per probe
    bandwidth: float  # bytes per second, effective per client
    hit_rate: float
    # "fixed" uses hit_rate as given; "capacity" tracks resident prefixes
    # with LRU eviction and ignores hit_rate.
    hit_mode: str = "fixed"


@dataclass(frozen=True)
class MemoryHierarchy:
    levels: tuple[MemoryLevel, ...]
    terminal: str = TERMINAL_ASSUME_HIT
    # Recompute cost is priced by the caller (seconds per retrieval) and
    # charged when every level misses under a recompute terminal.

    def validate(self) -> None:
        if self.terminal not in (TERMINAL_ASSUME_HIT, TERMINAL_RECOMPUTE):
            raise ConfigError(f"hierarchy: unknown terminal {self.terminal!r}")
        for i, lv in enumerate(self.levels):
            if lv.capacity <= 0 or lv.bandwidth <= 0:
                raise ConfigError(f"hierarchy level {i}: capacity and bandwidth must be > 0")
            if lv.lookup_latency < 0:
                raise ConfigError(f"hierarchy level {i}: lookup_latency must be >= 0")
            if not (0.0 <= lv.hit_rate <= 1.0):
                raise ConfigError(f"hierarchy level {i}: hit_rate must be in [0, 1]")
            if lv.hit_mode not in ("fixed", "capacity"):
                raise ConfigError(f"hierarchy level {i}: unknown hit_mode {lv.hit_mode!r}")
        if self.terminal == TERMINAL_ASSUME_HIT:
            if not self.levels:
                raise ConfigError("hierarchy: assume_hit terminal requires >= 1 level")
            if self.levels[-1].hit_rate != 1.0:
                raise ConfigError(
                    "hierarchy: assume_hit terminal requires the last level's "
                    "hit_rate to be 1.0"
                )


def retrieval_latency(hierarchy: MemoryHierarchy, size_bytes: float,
                      recompute_cost: float = 0.0) -> float:
    """Expected latency to materialize size_bytes of KV from the hierarchy.

    Level n hits with probability H_n and then costs its lookup latency plus
    the transfer time of the full payload; a miss falls through to level n+1
    at no cost.  Under a recompute terminal the residual miss path costs
    recompute_cost.
    """
    hierarchy.validate()
    if size_bytes < 0:
        raise HardwareModelError("retrieval_latency: size_bytes must be >= 0")
    expected = 0.0
    p_reach = 1.0
    for lv in hierarchy.levels:
        hit_cost = lv.lookup_latency + size_bytes / lv.bandwidth
        expected += p_reach * lv.hit_rate * hit_cost
        p_reach *= 1.0 - lv.hit_rate
    if hierarchy.terminal == TERMINAL_RECOMPUTE:
        expected += p_reach * recompute_cost
    # assume_hit: last level hit_rate is 1.0, so p_reach is already 0.
    return expected


def sample_hit_level(hierarchy: MemoryHierarchy,
                     rng: Union[int, np.random.Generator]) -> int:
    """Sample which level serves a retrieval.

    Returns the 0-based level index, or RECOMPUTE_LEVEL when every level
    misses under a recompute terminal.
    """
    hierarchy.validate()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    for i, lv in enumerate(hierarchy.levels):
        if rng.random() < lv.hit_rate:
            return i
    if hierarchy.terminal == TERMINAL_RECOMPUTE:
        return RECOMPUTE_LEVEL
    return len(hierarchy.levels) - 1  # unreachable for valid assume_hit


class LRUPrefixCache:
    """Resident-prefix bookkeeping for a capacity-mode hierarchy level."""

    def __init__(self, capacity: float):
        self.capacity = capacity
        self._entries: dict[str, float] = {}  # prefix_id -> bytes, LRU order
        self._used = 0.0

    def probe(self, prefix_id: str) -> bool:
        if prefix_id in self._entries:
            self._entries[prefix_id] = self._entries.pop(prefix_id)  # refresh
            return True
        return False

    def insert(self, prefix_id: str, size_bytes: float) -> None:
        if size_bytes > self.capacity:
            return  # cannot ever be resident
        if prefix_id in self._entries:
            self._used -= self._entries.pop(prefix_id)
        while self._used + size_bytes > self.capacity and self._entries:
            oldest = next(iter(self._entries))
            self._used -= self._entries.pop(oldest)
        self._entries[prefix_id] = size_bytes
        self._used += size_bytes


# ---------------------------------------------------------------------------
# Client interconnect topology

LINK_INTRA_PLATFORM = "intra_platform"
LINK_INTRA_RACK = "intra_rack"
LINK_INTER_RACK = "inter_rack"

# Same-client "transfers" are free and never queue.
SELF_LINK = LinkSpec(bandwidth=math.inf, latency=0.0)


@dataclass(frozen=True)
class Placement:
    platform: int
    rack: int


@dataclass
class ClientInterconnect:
    """Maps client placements to the tightest link class a transfer crosses."""

    placements: dict[int, Placement]
    links: dict[str, LinkSpec]

    def validate(self) -> None:
        for cls in (LINK_INTRA_PLATFORM, LINK_INTRA_RACK, LINK_INTER_RACK):
            if cls not in self.links:
                raise ConfigError(f"topology: missing link class {cls!r}")
            spec = self.links[cls]
            if spec.bandwidth <= 0 or spec.latency < 0:
                raise ConfigError(f"topology: invalid link class {cls!r}")

    def link_params(self, src: int, dst: int) -> LinkSpec:
        if src == dst:
            return SELF_LINK
        try:
            a, b = self.placements[src], self.placements[dst]
        except KeyError as e:
            raise ConfigError(f"topology: client {e.args[0]} has no placement") from None
        if a.platform == b.platform and a.rack == b.rack:
            return self.links[LINK_INTRA_PLATFORM]
        if a.rack == b.rack:
            return self.links[LINK_INTRA_RACK]
        return self.links[LINK_INTER_RACK]


def single_site_topology(client_ids: Sequence[int],
                         link: Optional[LinkSpec] = None) -> ClientInterconnect:
    """All clients on one platform; useful default for small setups."""
    link = link or LinkSpec(bandwidth=128e9, latency=1e-6)
    return ClientInterconnect(
        placements={cid: Placement(0, 0) for cid in client_ids},
        links={LINK_INTRA_PLATFORM: link, LINK_INTRA_RACK: link,
               LINK_INTER_RACK: link},
    )
