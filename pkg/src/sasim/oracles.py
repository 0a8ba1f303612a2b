"""Independent reference implementations used to cross-check the fast paths.

These deliberately avoid the im2col layout and the GEMM kernels: convolution
is the plain six-loop definition, dot products go through Python big ints,
pooling walks windows one by one. Slow and obviously correct.
"""

from __future__ import annotations

import numpy as np

from .kernels import USE_NUMBA

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _direct_conv_loop(x, w4, bias, bias_shift, s, pad):  # pragma: no cover
        h, win, c_in = x.shape
        c_out, k, _, _ = w4.shape
        h_out = (h + 2 * pad - k) // s + 1
        w_out = (win + 2 * pad - k) // s + 1
        out = np.empty((h_out, w_out, c_out), dtype=np.int32)
        for oh in range(h_out):
            for ow in range(w_out):
                for o in range(c_out):
                    acc = np.int32(bias[o]) << bias_shift
                    for kh in range(k):
                        ih = oh * s - pad + kh
                        if ih < 0 or ih >= h:
                            continue
                        for kw in range(k):
                            iw = ow * s - pad + kw
                            if iw < 0 or iw >= win:
                                continue
                            for ci in range(c_in):
                                acc += np.int32(x[ih, iw, ci]) * np.int32(w4[o, kh, kw, ci])
                    out[oh, ow, o] = acc
        return out

else:

    def _direct_conv_loop(x, w4, bias, bias_shift, s, pad):
        h, win, c_in = x.shape
        c_out, k, _, _ = w4.shape
        h_out = (h + 2 * pad - k) // s + 1
        w_out = (win + 2 * pad - k) // s + 1
        out = np.empty((h_out, w_out, c_out), dtype=np.int32)
        xi = x.astype(np.int64)
        wi = w4.astype(np.int64)
        for oh in range(h_out):
            for ow in range(w_out):
                for o in range(c_out):
                    acc = int(bias[o]) << bias_shift
                    for kh in range(k):
                        ih = oh * s - pad + kh
                        if ih < 0 or ih >= h:
                            continue
                        for kw in range(k):
                            iw = ow * s - pad + kw
                            if iw < 0 or iw >= win:
                                continue
                            acc += int(np.dot(xi[ih, iw], wi[o, kh, kw]))
                    out[oh, ow, o] = acc
        return out


def direct_conv(x: np.ndarray, w4: np.ndarray, bias: np.ndarray, bias_shift: int, s: int, pad: int) -> np.ndarray:
    """Six-loop convolution over HWC int8 input and (c_out,k,k,c_in) weights."""
    return _direct_conv_loop(
        np.ascontiguousarray(x, dtype=np.int8),
        np.ascontiguousarray(w4, dtype=np.int8),
        np.ascontiguousarray(bias, dtype=np.int8),
        bias_shift,
        s,
        pad,
    )


def bigint_dot(w_row, x_col, bias: int = 0, bias_shift: int = 0) -> int:
    """Exact dot product through Python integers (never overflows)."""
    acc = int(bias) << bias_shift
    for a, b in zip(w_row, x_col):
        acc += int(a) * int(b)
    return acc


def naive_maxpool(x: np.ndarray, k: int, s: int, pad: int) -> np.ndarray:
    """Max over each window, padding positions excluded from the max."""
    h, w, c = x.shape
    h_out = (h + 2 * pad - k) // s + 1
    w_out = (w + 2 * pad - k) // s + 1
    out = np.empty((h_out, w_out, c), dtype=np.int8)
    for oh in range(h_out):
        for ow in range(w_out):
            ih0, iw0 = oh * s - pad, ow * s - pad
            ih1, iw1 = min(ih0 + k, h), min(iw0 + k, w)
            ih0, iw0 = max(ih0, 0), max(iw0, 0)
            out[oh, ow] = x[ih0:ih1, iw0:iw1].max(axis=(0, 1))
    return out


def naive_avgpool(x: np.ndarray, k: int, s: int, q: int, shift: int) -> np.ndarray:
    """Uniform-weight pooling: round-half-away((q * patch_sum) / 2**shift)."""
    h, w, c = x.shape
    h_out = (h - k) // s + 1
    w_out = (w - k) // s + 1
    out = np.empty((h_out, w_out, c), dtype=np.int8)
    half = 1 << (shift - 1) if shift > 0 else 0
    for oh in range(h_out):
        for ow in range(w_out):
            for ch in range(c):
                acc = q * int(x[oh * s : oh * s + k, ow * s : ow * s + k, ch].astype(np.int64).sum())
                mag = (abs(acc) + half) >> shift
                val = mag if acc >= 0 else -mag
                out[oh, ow, ch] = max(-128, min(127, val))
    return out
