"""DNN workload ingestion: layer descriptions, GEMM lowering, weight tiling.

Layers are declared as a flat ordered list (JSON-compatible dicts). Conv and
FC layers lower to an N x M x P GEMM; global/strided average pooling lowers
to a channelwise GEMM with a single row of uniform quantized weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

ALIGN_BYTES = 32  # minimum HBM transfer granularity

LAYER_KINDS = ("conv", "fc", "avgpool_as_conv", "maxpool")
ACTIVATIONS = ("relu", "none")


class WorkloadError(ValueError):
    pass


def align32(n: int) -> int:
    return -(-n // ALIGN_BYTES) * ALIGN_BYTES


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class LayerSpec:
    """One DNN layer: geometry, quantization shifts and residual wiring."""

    id: int
    kind: str
    k: int = 1
    s: int = 1
    p: int = 0
    c_in: int = 1
    c_out: int = 1
    h_in: int = 1
    w_in: int = 1
    activation: str = "none"
    residual_source: Optional[int] = None
    weight_shift: int = 0
    bias_shift: int = 0
    output_shift: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise WorkloadError(f"layer {self.id}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise WorkloadError(f"layer {self.id}: unknown activation {self.activation!r}")
        if self.k < 1 or self.s < 1 or self.p < 0:
            raise WorkloadError(f"layer {self.id}: bad kernel geometry k={self.k} s={self.s} p={self.p}")
        if self.c_in < 1 or self.c_out < 1:
            raise WorkloadError(f"layer {self.id}: channel counts must be >= 1")
        if self.output_shift < 0 or self.bias_shift < 0:
            raise WorkloadError(f"layer {self.id}: shifts must be >= 0")

    @property
    def h_out(self) -> int:
        if self.kind == "fc":
            return 1
        return (self.h_in + 2 * self.p - self.k) // self.s + 1

    @property
    def w_out(self) -> int:
        if self.kind == "fc":
            return 1
        return (self.w_in + 2 * self.p - self.k) // self.s + 1

    @property
    def has_residual(self) -> bool:
        return self.residual_source is not None

    def out_dims(self) -> tuple[int, int, int]:
        if self.kind == "maxpool":
            return (self.h_out, self.w_out, self.c_in)
        return (self.h_out, self.w_out, self.c_out)


@dataclass(frozen=True)
class GemmShape:
    """Lowered GEMM geometry: n output rows, m reduction, p input columns."""

    n: int
    m: int
    m_padded: int
    p: int


@dataclass(frozen=True)
class TileSpec:
    """One R_SA-row slice of a layer's weight matrix."""

    tile_id: int
    layer_id: int
    rows: int
    uram_entries: int
    weight_bytes: int


@dataclass
class ModelGraph:
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        by_id = {}
        prev_dims = None
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise WorkloadError(f"layer ids must be consecutive from 0, got {layer.id} at position {i}")
            if prev_dims is not None:
                expect = (layer.h_in, layer.w_in, layer.c_in)
                if expect != prev_dims:
                    raise WorkloadError(
                        f"layer {layer.id}: input dims {expect} do not chain from previous output {prev_dims}"
                    )
            if layer.residual_source is not None:
                if layer.residual_source not in by_id:
                    raise WorkloadError(f"layer {layer.id}: residual source {layer.residual_source} is not earlier")
                src = by_id[layer.residual_source]
                if src.out_dims() != layer.out_dims():
                    raise WorkloadError(
                        f"layer {layer.id}: residual source {src.id} output {src.out_dims()} "
                        f"!= layer output {layer.out_dims()}"
                    )
            by_id[layer.id] = layer
            prev_dims = layer.out_dims()

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def conv_to_gemm(layer: LayerSpec) -> GemmShape:
    """Lower a conv/fc/avgpool layer to its GEMM shape.

    FC is a 1x1 conv on a 1x1 map. Average pooling maps channelwise: one
    uniform weight row over k*k patch elements, one column per (pixel,
    channel) pair, so n=1 and p = h_out*w_out*c_in.
    """
    if layer.kind == "maxpool":
        raise WorkloadError("maxpool layers have no GEMM shape")
    if layer.kind == "fc":
        n, m, p = layer.c_out, layer.c_in, 1
    elif layer.kind == "avgpool_as_conv":
        if layer.h_in + 2 * layer.p < layer.k or layer.w_in + 2 * layer.p < layer.k:
            raise WorkloadError(f"layer {layer.id}: window larger than padded input")
        n = 1
        m = layer.k * layer.k
        p = layer.h_out * layer.w_out * layer.c_in
    else:
        if layer.h_in + 2 * layer.p < layer.k or layer.w_in + 2 * layer.p < layer.k:
            raise WorkloadError(f"layer {layer.id}: kernel larger than padded input")
        n = layer.c_out
        m = layer.k * layer.k * layer.c_in
        p = layer.h_out * layer.w_out
    if layer.kind != "fc" and (layer.h_out < 1 or layer.w_out < 1):
        raise WorkloadError(f"layer {layer.id}: non-positive output spatial dims")
    return GemmShape(n=n, m=m, m_padded=align32(m), p=p)


def tile_layer(shape: GemmShape, pu) -> list[TileSpec]:
    """Partition a weight matrix into R_SA-row tiles, last tile ragged.

    Ragged tiles are padded to R_SA rows for timing but weight_bytes counts
    true rows only.
    """
    from .putiming import uram_capacity  # local import to avoid a cycle

    entries = ceil_div(shape.m_padded, pu.c_sa)
    cap = uram_capacity(pu)
    if entries > cap:
        raise WorkloadError(f"tile needs {entries} URAM entries, capacity is {cap}")
    tiles = []
    n_tiles = ceil_div(shape.n, pu.r_sa)
    for t in range(n_tiles):
        rows = min(pu.r_sa, shape.n - t * pu.r_sa)
        tiles.append(
            TileSpec(
                tile_id=t,
                layer_id=-1,
                rows=rows,
                uram_entries=entries,
                weight_bytes=rows * shape.m_padded,
            )
        )
    return tiles


def avgpool_quant(k: int, max_shift: int = 15) -> tuple[int, int]:
    """Pick (q, shift) with int8 q so q/2**shift best approximates 1/k**2.

    Scans shift in [0, max_shift] with q clamped to [1, 127]; smallest shift
    wins ties (exact powers of two collapse to the minimal pair).
    """
    target = 1.0 / (k * k)
    best = None
    for shift in range(max_shift + 1):
        q = round(target * (1 << shift))
        q = min(127, max(1, q))
        err = abs(q / (1 << shift) - target)
        if best is None or err < best[0] - 1e-18:
            best = (err, q, shift)
    return best[1], best[2]


def avgpool_to_conv(id: int, k: int, c: int, h_in: int, w_in: int, s: Optional[int] = None) -> LayerSpec:
    """Emit the avgpool layer record; its uniform weight is avgpool_quant(k)."""
    _, shift = avgpool_quant(k)
    return LayerSpec(
        id=id,
        kind="avgpool_as_conv",
        k=k,
        s=s if s is not None else k,
        p=0,
        c_in=c,
        c_out=c,
        h_in=h_in,
        w_in=w_in,
        activation="none",
        output_shift=shift,
    )


_LAYER_FIELDS = {f for f in LayerSpec.__dataclass_fields__}


def layer_from_dict(d: dict, index: int) -> LayerSpec:
    unknown = set(d) - _LAYER_FIELDS
    if unknown:
        raise WorkloadError(f"layer record {index}: unknown fields {sorted(unknown)}")
    if "id" not in d:
        d = dict(d, id=index)
    try:
        return LayerSpec(**d)
    except TypeError as e:
        raise WorkloadError(f"layer record {index}: {e}") from e


def load_model(path: str) -> ModelGraph:
    """Load a model config file (JSON, one record per layer)."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise WorkloadError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    records = doc["layers"] if isinstance(doc, dict) else doc
    layers = [layer_from_dict(r, i) for i, r in enumerate(records)]
    return ModelGraph(layers)


def dump_model(graph: ModelGraph, path: str):
    records = []
    for layer in graph:
        d = asdict(layer)
        if d["residual_source"] is None:
            del d["residual_source"]
        records.append(d)
    with open(path, "w") as f:
        json.dump({"layers": records}, f, indent=1)
        f.write("\n")
