"""Cycle model of one processing unit.

All compute quantities are fast-clock cycles (the SA domain runs at twice
the AXI system clock); port streams are priced in system cycles by the hbm
module and doubled here. A layer's steady-state latency is the max of its
compute, WRB drain, shared I/O stream, and residual stream terms, plus a
small pipeline-fill constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import hbm
from .workload import GemmShape, LayerSpec, ModelGraph, align32, ceil_div, conv_to_gemm


class TimingError(ValueError):
    pass


@dataclass(frozen=True)
class PUConfig:
    name: str = "pu"
    r_sa: int = 64
    c_sa: int = 8
    r_g: int = 8
    f_fast: float = 600e6
    f_sys: float = 300e6
    uram_blocks: int = 64
    uram_depth: int = 4096
    sub_regions: int = 1
    fill_cycles: int = 64 + 8 + 16  # wave traversal plus post-processing registers

    def __post_init__(self):
        if abs(self.f_fast - 2 * self.f_sys) > 1e-6 * self.f_fast:
            raise TimingError("fast clock must be twice the system clock")
        if self.r_sa % self.r_g:
            raise TimingError("r_sa must be a multiple of r_g")
        if self.sub_regions not in (1, 2):
            raise TimingError("sub_regions must be 1 or 2")


@dataclass(frozen=True)
class PortSet:
    io: hbm.HbmPortConfig
    params: hbm.HbmPortConfig


@dataclass
class LayerTiming:
    layer_id: int
    kind: str
    n: int
    m: int
    p: int
    compute_cycles: int  # raw SA cycles, fill excluded
    input_cycles: int
    output_cycles: int
    weight_cycles: int
    residual_cycles: int
    latency_s: float
    bound: str


def uram_capacity(pu: PUConfig) -> int:
    """Column-entry capacity of one tile slot (entries are c_sa-byte words)."""
    return pu.uram_depth * pu.sub_regions


def compute_cycles(shape: GemmShape, pu: PUConfig, m_eff: Optional[int] = None) -> int:
    """Fast cycles for the full GEMM: p * ceil(n/r_sa) * ceil(m/c_sa) + fill."""
    m = m_eff if m_eff is not None else shape.m_padded
    return shape.p * ceil_div(shape.n, pu.r_sa) * ceil_div(m, pu.c_sa) + pu.fill_cycles


def wrb_ok(shape: GemmShape, pu: PUConfig) -> bool:
    """True when the reorder buffer drains at least as fast as waves arrive."""
    return pu.r_g >= pu.r_sa / ceil_div(shape.m_padded, pu.c_sa)


def output_cycles(shape: GemmShape, pu: PUConfig, m_eff: Optional[int] = None) -> int:
    """Fast cycles to emit all outputs: SA wave interval or WRB drain rate,
    whichever is slower."""
    m = m_eff if m_eff is not None else shape.m_padded
    interval = max(ceil_div(m, pu.c_sa), pu.r_sa // pu.r_g)
    return shape.p * ceil_div(shape.n, pu.r_sa) * interval


def pu_tops(pu: PUConfig) -> float:
    return 2 * pu.r_sa * pu.c_sa * pu.f_fast / 1e12


def effective_m(layer: LayerSpec, shape: GemmShape, mode: Optional[str]) -> int:
    """Buffer bytes per column actually seen by the SA.

    Sub-32-byte layers on the in-fabric im2col path carry their per-row
    alignment padding into the buffer, growing the reduction.
    """
    if mode == "fpga":
        return hbm.buffer_column_bytes(layer)
    return shape.m_padded


def layer_weight_bytes(layer: LayerSpec, shape: GemmShape) -> int:
    if layer.kind == "maxpool":
        return 0
    return shape.n * shape.m_padded


def resolve_layer_mode(layer: LayerSpec, is_first_gemm: bool, first_layer: str) -> Optional[str]:
    """Pick the transfer path for a conv layer whose im2col commands would
    fall under the 32-byte minimum."""
    if layer.kind != "conv" or hbm.is_fast_path(layer):
        return None
    if layer.k * layer.c_in >= 32:
        return None
    if is_first_gemm:
        if first_layer not in ("host", "fpga"):
            raise TimingError(f"first_layer must be host or fpga, got {first_layer!r}")
        return first_layer
    return "fpga"  # mid-model layers cannot be host-prepared


def layer_latency(layer: LayerSpec, shape: GemmShape, pu: PUConfig, ports: PortSet,
                  first_layer_mode: Optional[str] = None) -> LayerTiming:
    """Steady-state latency of one layer with all weight tiles resident."""
    if layer.kind == "maxpool":
        return LayerTiming(layer.id, layer.kind, 0, 0, 0, 0, 0, 0, 0, 0, 0.0, "compute")

    m_eff = effective_m(layer, shape, first_layer_mode)
    comp = shape.p * ceil_div(shape.n, pu.r_sa) * ceil_div(m_eff, pu.c_sa)
    wrb = shape.p * ceil_div(shape.n, pu.r_sa) * max(ceil_div(m_eff, pu.c_sa), pu.r_sa // pu.r_g)

    in_tr = hbm.input_traffic(layer, shape, first_layer_mode)
    out_tr = hbm.output_traffic(layer, shape)
    in_fast = 2 * hbm.stream_cycles(in_tr, ports.io, columns=shape.p)
    out_fast = 2 * hbm.stream_cycles(out_tr, ports.io)
    io_fast = in_fast + out_fast

    res_tr = hbm.residual_traffic(layer, shape)
    res_fast = 2 * hbm.stream_cycles(res_tr, ports.params)

    wload = 2 * hbm.transfer_cycles(layer_weight_bytes(layer, shape),
                                    ceil_div(shape.n, pu.r_sa), ports.params)

    terms = [
        ("compute", comp),
        ("input" if in_fast >= out_fast else "output", io_fast),
        ("output", wrb),
        ("params", res_fast),
    ]
    bound, steady = terms[0]
    for name, val in terms[1:]:
        if val > steady:
            bound, steady = name, val
    latency = (steady + pu.fill_cycles) / pu.f_fast

    return LayerTiming(
        layer_id=layer.id,
        kind=layer.kind,
        n=shape.n,
        m=shape.m,
        p=shape.p,
        compute_cycles=comp,
        input_cycles=in_fast,
        output_cycles=max(wrb, out_fast),
        weight_cycles=wload,
        residual_cycles=res_fast,
        latency_s=latency,
        bound=bound,
    )


def first_gemm_layer_id(graph: ModelGraph) -> Optional[int]:
    for layer in graph:
        if layer.kind != "maxpool":
            return layer.id
    return None


def model_latency(graph: ModelGraph, pu: PUConfig, ports: PortSet, stall_s: float = 0.0,
                  first_layer: str = "host") -> tuple[float, list[LayerTiming]]:
    """Frame latency: sum of per-layer steady-state latencies plus scheduler
    stalls. Max-pool layers cost nothing (fused into post-processing)."""
    first_id = first_gemm_layer_id(graph)
    timings = []
    total = 0.0
    for layer in graph:
        if layer.kind == "maxpool":
            timings.append(layer_latency(layer, GemmShape(0, 0, 0, 0), pu, ports))
            continue
        shape = conv_to_gemm(layer)
        mode = resolve_layer_mode(layer, layer.id == first_id, first_layer)
        t = layer_latency(layer, shape, pu, ports, first_layer_mode=mode)
        timings.append(t)
        total += t.latency_s
    return total + stall_s, timings


def model_macs(graph: ModelGraph) -> int:
    """True multiply-accumulates per frame (padding excluded)."""
    macs = 0
    for layer in graph:
        if layer.kind == "maxpool":
            continue
        shape = conv_to_gemm(layer)
        macs += shape.n * shape.m * shape.p
    return macs
