"""Bit-exact INT8 functional engine: im2col, GEMM, rescale, activations.

Everything the timing model abstracts away is computed here exactly, so this
module doubles as the correctness oracle for the transfer-level machinery.
All tensors are HWC (channel fastest), weights row-major with rows matching
the im2col patch order (kh, kw, c).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .workload import GemmShape, LayerSpec, ModelGraph, avgpool_quant, conv_to_gemm

MAX_REDUCTION = 1 << 15  # keeps 32-bit accumulators overflow-free


class FunctionalError(ValueError):
    pass


class ScaleMismatchError(FunctionalError):
    pass


@dataclass
class QTensor:
    """INT8 activation tensor in HWC order with a power-of-two scale shift."""

    data: np.ndarray
    shift: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if self.data.ndim != 3:
            raise FunctionalError(f"QTensor data must be (h, w, c), got shape {self.data.shape}")

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def c(self):
        return self.data.shape[2]


@dataclass
class WeightMatrix:
    data: np.ndarray
    shift: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if self.data.ndim != 2:
            raise FunctionalError("WeightMatrix data must be (n, m)")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def m(self):
        return self.data.shape[1]


@dataclass
class BiasVector:
    data: np.ndarray
    bias_shift: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if self.data.ndim != 1:
            raise FunctionalError("BiasVector data must be one-dimensional")


def im2col(x: QTensor, layer: LayerSpec) -> np.ndarray:
    """Patch matrix for a conv/fc layer: (m_padded, p) int8."""
    if layer.kind not in ("conv", "fc"):
        raise FunctionalError(f"im2col expects conv/fc, got {layer.kind}")
    if (x.h, x.w, x.c) != (layer.h_in, layer.w_in, layer.c_in):
        raise FunctionalError(
            f"input dims {(x.h, x.w, x.c)} do not match layer {(layer.h_in, layer.w_in, layer.c_in)}"
        )
    shape = conv_to_gemm(layer)
    if layer.kind == "fc":
        return x.data.reshape(-1, 1).astype(np.int8)
    return kernels.im2col_i8(x.data, layer.k, layer.s, layer.p, shape.m_padded)


def avgpool_im2col(x: QTensor, layer: LayerSpec) -> np.ndarray:
    """Channelwise patch matrix: column ((oh*w_out + ow)*c + ch) holds that
    channel's k*k window, zero-padded to m_padded rows."""
    shape = conv_to_gemm(layer)
    k, s = layer.k, layer.s
    h_out, w_out = layer.h_out, layer.w_out
    out = np.zeros((shape.m_padded, shape.p), dtype=np.int8)
    for oh in range(h_out):
        for ow in range(w_out):
            patch = x.data[oh * s : oh * s + k, ow * s : ow * s + k, :]
            base = (oh * w_out + ow) * layer.c_in
            out[: k * k, base : base + layer.c_in] = patch.reshape(k * k, layer.c_in)
    return out


def gemm_int8(w: WeightMatrix, x: np.ndarray, b: BiasVector) -> np.ndarray:
    """acc[i, j] = (b[i] << bias_shift) + sum_k w[i, k] * x[k, j], int32 exact."""
    if w.m != x.shape[0]:
        raise FunctionalError(f"reduction mismatch: weights m={w.m}, activations rows={x.shape[0]}")
    if w.n != len(b.data):
        raise FunctionalError(f"bias length {len(b.data)} != rows {w.n}")
    if w.m > MAX_REDUCTION:
        raise FunctionalError(f"reduction {w.m} exceeds the 32-bit accumulator guarantee")
    return kernels.gemm_i32(w.data, x, b.data, b.bias_shift)


def rescale(acc, output_shift: int):
    """Round-to-nearest with ties away from zero, then saturate to int8."""
    if output_shift < 0:
        raise FunctionalError("output_shift must be >= 0")
    acc = np.asarray(acc, dtype=np.int64)
    if output_shift > 0:
        half = np.int64(1) << (output_shift - 1)
        mag = (np.abs(acc) + half) >> output_shift
        y = np.where(acc < 0, -mag, mag)
    else:
        y = acc
    return np.clip(y, -128, 127).astype(np.int8)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.int8), np.int8(0))


def residual_add(a, b):
    """Saturating int8 elementwise add. Operands must share one scale shift
    (checked by the caller, which owns the QTensor bookkeeping)."""
    wide = np.asarray(a, dtype=np.int16) + np.asarray(b, dtype=np.int16)
    return np.clip(wide, -128, 127).astype(np.int8)


def maxpool(x: QTensor, k: int, s: int, p: int = 0) -> QTensor:
    if x.h + 2 * p < k or x.w + 2 * p < k:
        raise FunctionalError("pool window larger than padded input")
    h_out = (x.h + 2 * p - k) // s + 1
    w_out = (x.w + 2 * p - k) // s + 1
    out = np.empty((h_out, w_out, x.c), dtype=np.int8)
    for oh in range(h_out):
        for ow in range(w_out):
            ih0, iw0 = oh * s - p, ow * s - p
            ih1, iw1 = min(ih0 + k, x.h), min(iw0 + k, x.w)
            ih0, iw0 = max(ih0, 0), max(iw0, 0)
            out[oh, ow] = x.data[ih0:ih1, iw0:iw1].max(axis=(0, 1))
    return QTensor(out, x.shift)


def _avgpool_weight(layer: LayerSpec, m_padded: int) -> WeightMatrix:
    q, _ = avgpool_quant(layer.k)
    row = np.zeros((1, m_padded), dtype=np.int8)
    row[0, : layer.k * layer.k] = q
    return WeightMatrix(row, shift=layer.output_shift)


def _activation(y: np.ndarray, layer: LayerSpec) -> np.ndarray:
    return relu(y) if layer.activation == "relu" else y


def run_layer(layer: LayerSpec, x: QTensor, w: WeightMatrix | None, b: BiasVector | None,
              residual: QTensor | None = None) -> QTensor:
    """Execute one layer exactly: lower, GEMM, rescale, activate, fuse residual."""
    if layer.kind == "maxpool":
        return maxpool(x, layer.k, layer.s, layer.p)

    shape = conv_to_gemm(layer)
    if layer.kind == "avgpool_as_conv":
        mat = avgpool_im2col(x, layer)
        w = _avgpool_weight(layer, shape.m_padded)
        b = BiasVector(np.zeros(1, dtype=np.int8))
    else:
        mat = im2col(x, layer)
        if w is None or b is None:
            raise FunctionalError(f"layer {layer.id}: missing weights or biases")
        if w.data.shape[1] == shape.m:  # accept unpadded weights, zero-extend
            padded = np.zeros((shape.n, shape.m_padded), dtype=np.int8)
            padded[:, : shape.m] = w.data
            w = WeightMatrix(padded, w.shift)
        elif w.data.shape[1] != shape.m_padded:
            raise FunctionalError(
                f"layer {layer.id}: weight columns {w.data.shape[1]} match neither m={shape.m} "
                f"nor m_padded={shape.m_padded}"
            )

    acc = gemm_int8(w, mat, b)
    y = rescale(acc, layer.output_shift)
    y = _activation(y, layer)

    h_out, w_out, c_out = layer.out_dims()
    if layer.kind == "avgpool_as_conv":
        ten = y.reshape(h_out, w_out, c_out)
    else:
        ten = y.T.reshape(h_out, w_out, c_out)  # columns are pixels, rows channels

    if layer.has_residual:
        if residual is None:
            raise FunctionalError(f"layer {layer.id}: residual input not provided")
        if residual.shift != layer.output_shift:
            raise ScaleMismatchError(
                f"layer {layer.id}: residual shift {residual.shift} != output shift {layer.output_shift}"
            )
        ten = residual_add(ten, residual.data)
        ten = _activation(ten, layer)

    return QTensor(np.asarray(ten, dtype=np.int8), layer.output_shift)


def run_model(graph: ModelGraph, x: QTensor, weights: dict, biases: dict) -> list[QTensor]:
    """Run every layer in order, returning each layer's output tensor.

    ``weights[layer_id]`` is an (n, m) or (n, m_padded) int8 array,
    ``biases[layer_id]`` an (n,) int8 array; avgpool and maxpool layers need
    neither.
    """
    outputs: list[QTensor] = []
    cur = x
    for layer in graph:
        w = b = None
        if layer.kind in ("conv", "fc"):
            w = WeightMatrix(weights[layer.id], shift=layer.weight_shift)
            b = BiasVector(biases[layer.id], bias_shift=layer.bias_shift)
        res = outputs[layer.residual_source] if layer.has_residual else None
        cur = run_layer(layer, cur, w, b, residual=res)
        outputs.append(cur)
    return outputs
