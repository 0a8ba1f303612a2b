"""HBM port bandwidth model and ADM command-stream generation.

Ports are linear bandwidth calculators with per-command overhead. The
command generator lowers conv patch gathers to address/length bundles with
32-byte alignment, border clipping, and zero-fill directives for padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .workload import ALIGN_BYTES, GemmShape, LayerSpec, align32, ceil_div, conv_to_gemm


class HbmError(ValueError):
    pass


class SubMinimumTransferError(HbmError):
    """Every command of the layer would be under the 32-byte minimum.

    Signals that the layer should run through the host-prepared GEMM path
    unless the caller explicitly opts into padded scattered transfers.
    """


@dataclass(frozen=True)
class HbmPortConfig:
    width_bits: int = 256
    clock_hz: float = 300e6
    efficiency: float = 0.90
    cmd_overhead_cycles: int = 4
    # Sub-32-byte gathers cannot pipeline; each command pays roughly one HBM
    # random-access service time instead of the streaming overhead.
    scattered_cmd_latency_cycles: int = 16

    def __post_init__(self):
        if self.width_bits not in (256, 128):
            raise HbmError(f"width_bits must be 256 or 128, got {self.width_bits}")
        if not (0.0 < self.efficiency <= 1.0):
            raise HbmError(f"efficiency must be in (0, 1], got {self.efficiency}")

    @property
    def bytes_per_cycle(self) -> int:
        return self.width_bits // 8


@dataclass(frozen=True)
class AdmCommand:
    """One data-mover command; keep <= len bytes are consumed downstream,
    the rest is alignment over-fetch."""

    addr: int
    len: int
    keep: int

    def __post_init__(self):
        if self.len < ALIGN_BYTES or self.len % ALIGN_BYTES:
            raise HbmError(f"command length {self.len} violates the 32-byte rule")
        if not (0 < self.keep <= self.len):
            raise HbmError(f"keep {self.keep} out of range for len {self.len}")


@dataclass(frozen=True)
class ZeroFill:
    """Padding bytes synthesized in the activation buffer, no HBM traffic."""

    len: int


@dataclass
class TransferPlan:
    directives: list = field(default_factory=list)

    @property
    def commands(self) -> list[AdmCommand]:
        return [d for d in self.directives if isinstance(d, AdmCommand)]

    @property
    def total_bytes(self) -> int:
        return sum(d.len for d in self.directives if isinstance(d, AdmCommand))

    def total_cycles(self, port: HbmPortConfig) -> int:
        return transfer_cycles(self.total_bytes, len(self.commands), port)

    def dump(self, fh):
        for d in self.directives:
            if isinstance(d, AdmCommand):
                fh.write(f"{d.addr},{d.len}\n")
            else:
                fh.write(f"zfill,{d.len}\n")


@dataclass
class LayerTransferPlan:
    columns: list[TransferPlan]
    scattered: bool = False

    @property
    def total_bytes(self) -> int:
        return sum(c.total_bytes for c in self.columns)

    @property
    def n_commands(self) -> int:
        return sum(len(c.commands) for c in self.columns)

    def dump(self, fh):
        for col in self.columns:
            col.dump(fh)


def transfer_cycles(nbytes: int, n_commands: int, port: HbmPortConfig) -> int:
    """System-clock cycles to move nbytes split over n_commands."""
    if nbytes < 0:
        raise HbmError("negative byte count")
    if nbytes == 0 and n_commands == 0:
        return 0
    data = int(np.ceil(ceil_div(nbytes, port.bytes_per_cycle) / port.efficiency)) if nbytes else 0
    return data + n_commands * port.cmd_overhead_cycles


def _column_directives(layer: LayerSpec, ifm_base: int, oh: int, ow: int,
                       m_padded: int, allow_sub32: bool) -> TransferPlan:
    k, s, pad, c = layer.k, layer.s, layer.p, layer.c_in
    row_pitch = layer.w_in * c
    plan = TransferPlan()
    if k * c < ALIGN_BYTES and not allow_sub32:
        raise SubMinimumTransferError(
            f"layer {layer.id}: interior commands are {k * c} < {ALIGN_BYTES} bytes; "
            "run this layer through the host-side GEMM path"
        )
    emitted = 0
    for kh in range(k):
        ih = oh * s - pad + kh
        if ih < 0 or ih >= layer.h_in:
            plan.directives.append(ZeroFill(k * c))
            emitted += k * c
            continue
        iw0 = ow * s - pad
        left = max(0, -iw0)
        span = min(iw0 + k, layer.w_in) - max(iw0, 0)
        right = k - left - span
        if left:
            plan.directives.append(ZeroFill(left * c))
            emitted += left * c
        if span > 0:
            keep = span * c
            addr = ifm_base + (ih * layer.w_in + max(iw0, 0)) * c
            plan.directives.append(AdmCommand(addr=addr, len=align32(keep), keep=keep))
            emitted += keep
        if right:
            plan.directives.append(ZeroFill(right * c))
            emitted += right * c
    if m_padded > emitted:
        plan.directives.append(ZeroFill(m_padded - emitted))
    return plan


def im2col_commands(layer: LayerSpec, ifm_base: int = 0, pixel: tuple[int, int] = (0, 0),
                    allow_sub32: bool = False) -> tuple[TransferPlan, LayerTransferPlan]:
    """ADM command bundles realizing the im2col gather for one conv layer.

    Returns the plan for the requested output pixel and the full per-layer
    plan (columns in output row-major order).
    """
    if layer.kind not in ("conv", "fc"):
        raise HbmError(f"im2col commands are defined for conv/fc layers, got {layer.kind}")
    shape = conv_to_gemm(layer)
    cols = []
    for oh in range(layer.h_out):
        for ow in range(layer.w_out):
            cols.append(_column_directives(layer, ifm_base, oh, ow, shape.m_padded, allow_sub32))
    scattered = layer.k * layer.c_in < ALIGN_BYTES
    oh, ow = pixel
    if not (0 <= oh < layer.h_out and 0 <= ow < layer.w_out):
        raise HbmError(f"pixel {pixel} outside the {layer.h_out}x{layer.w_out} output map")
    return cols[oh * layer.w_out + ow], LayerTransferPlan(cols, scattered=scattered)


def reconstruct_matrix(plan: LayerTransferPlan, ifm, ifm_base: int = 0) -> np.ndarray:
    """Replay a layer plan against the IFM bytes; must reproduce im2col."""
    flat = np.asarray(ifm.data if hasattr(ifm, "data") else ifm, dtype=np.int8).reshape(-1)
    cols = []
    for col_plan in plan.columns:
        parts = []
        for d in col_plan.directives:
            if isinstance(d, AdmCommand):
                off = d.addr - ifm_base
                parts.append(flat[off : off + d.keep])
            else:
                parts.append(np.zeros(d.len, dtype=np.int8))
        cols.append(np.concatenate(parts))
    return np.stack(cols, axis=1)


def is_fast_path(layer: LayerSpec) -> bool:
    """Linear/stride-patterned streaming: k=1, p=0, s in {1, 2}."""
    return layer.k == 1 and layer.p == 0 and layer.s in (1, 2)


@dataclass(frozen=True)
class TrafficSummary:
    """Aggregate stream shape for timing: exact bytes, command count, the
    interior per-column payload, and how the port should price commands."""

    total_bytes: int
    n_commands: int
    col_bytes: int  # bytes landing in the buffer per output column (interior)
    per_column: bool  # True when each column is a discrete buffer fill
    scattered: bool


def buffer_column_bytes(layer: LayerSpec) -> int:
    """Bytes per im2col column as laid out by 32-byte-aligned commands."""
    return layer.k * align32(layer.k * layer.c_in)


def input_traffic(layer: LayerSpec, shape: GemmShape, first_layer_mode: Optional[str] = None) -> TrafficSummary:
    """Activation-fetch stream for one layer on the I/O port.

    first_layer_mode: "host" reads host-prepared padded GEMM columns,
    "fpga" forces the padded scattered im2col path for sub-32-byte layers.
    """
    if layer.kind == "maxpool":
        return TrafficSummary(0, 0, 0, False, False)
    if first_layer_mode == "host":
        return TrafficSummary(shape.p * shape.m_padded, shape.p, shape.m_padded, True, False)
    if layer.kind == "avgpool_as_conv":
        nbytes = layer.h_in * layer.w_in * layer.c_in
        return TrafficSummary(nbytes, layer.h_in, 0, False, False)
    if layer.kind == "fc":
        return TrafficSummary(shape.m_padded, 1, shape.m_padded, False, False)
    if is_fast_path(layer):
        nbytes = shape.p * layer.c_in
        return TrafficSummary(nbytes, layer.h_out, layer.c_in, False, False)

    scattered = layer.k * layer.c_in < ALIGN_BYTES
    if scattered and first_layer_mode != "fpga":
        raise SubMinimumTransferError(
            f"layer {layer.id}: {layer.k * layer.c_in}-byte commands are under the 32-byte "
            "minimum; prepare this layer host-side or select the fpga first-layer path"
        )
    k, s, pad, c = layer.k, layer.s, layer.p, layer.c_in
    # Row validity depends only on oh, column span only on ow.
    nkh = np.empty(layer.h_out, dtype=np.int64)
    for oh in range(layer.h_out):
        ih0 = oh * s - pad
        nkh[oh] = sum(1 for kh in range(k) if 0 <= ih0 + kh < layer.h_in)
    span_bytes = np.empty(layer.w_out, dtype=np.int64)
    for ow in range(layer.w_out):
        iw0 = ow * s - pad
        span = min(iw0 + k, layer.w_in) - max(iw0, 0)
        span_bytes[ow] = align32(span * c) if span > 0 else 0
    n_commands = int(nkh.sum()) * int((span_bytes > 0).sum())
    total = int(nkh.sum()) * int(span_bytes.sum())
    return TrafficSummary(total, n_commands, buffer_column_bytes(layer), True, scattered)


def output_traffic(layer: LayerSpec, shape: GemmShape) -> TrafficSummary:
    """Result write-back stream: contiguous HWC rows."""
    if layer.kind == "maxpool":
        return TrafficSummary(0, 0, 0, False, False)
    nbytes = shape.p * shape.n
    return TrafficSummary(nbytes, max(1, layer.h_out), 0, False, False)


def residual_traffic(layer: LayerSpec, shape: GemmShape) -> TrafficSummary:
    """Residual operand stream on the params port (one byte per output)."""
    if not layer.has_residual:
        return TrafficSummary(0, 0, 0, False, False)
    return TrafficSummary(shape.p * shape.n, max(1, layer.h_out), 0, False, False)


def stream_cycles(traffic: TrafficSummary, port: HbmPortConfig, columns: int = 1) -> int:
    """System cycles for a stream, honoring per-column buffer-fill granularity
    and the scattered-command latency penalty."""
    if traffic.total_bytes == 0 and traffic.n_commands == 0:
        return 0
    overhead = port.scattered_cmd_latency_cycles if traffic.scattered else port.cmd_overhead_cycles
    if traffic.per_column:
        per_col = int(np.ceil(ceil_div(traffic.col_bytes, port.bytes_per_cycle) / port.efficiency))
        return columns * per_col + traffic.n_commands * overhead
    data = int(np.ceil(ceil_div(traffic.total_bytes, port.bytes_per_cycle) / port.efficiency))
    return data + traffic.n_commands * overhead


def weight_load_time_bytes(nbytes: int, port: HbmPortConfig) -> float:
    """Seconds to move nbytes of weights as a single command."""
    return transfer_cycles(nbytes, 1, port) / port.clock_hz


def weight_load_time(tile, port: HbmPortConfig) -> float:
    """Seconds to move one weight tile from HBM into the URAM column."""
    return weight_load_time_bytes(tile.weight_bytes, port)
