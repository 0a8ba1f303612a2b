"""Hot numeric kernels with two interchangeable backends.

The numba backend JIT-compiles the inner loops; the numpy backend is a pure
vectorized fallback. Selection order:

  SASIM_BACKEND=numpy   force the numpy path
  SASIM_BACKEND=numba   force numba (raises if numba is unavailable)
  unset / auto          numba when importable, else numpy

Both backends are importable side by side (``numpy_impl`` / ``numba_impl``)
so the benchmark and the tests can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

_MODE = os.environ.get("SASIM_BACKEND", "auto").lower()

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, fallback for safety
    _HAVE_NUMBA = False
    if _MODE == "numba":
        raise

if _MODE not in ("auto", "numba", "numpy"):
    raise ValueError(f"SASIM_BACKEND must be auto|numba|numpy, got {_MODE!r}")

USE_NUMBA = _HAVE_NUMBA and _MODE != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _gemm_i32_np(w: np.ndarray, x: np.ndarray, bias: np.ndarray, bias_shift: int) -> np.ndarray:
    acc = w.astype(np.int32) @ x.astype(np.int32)
    acc += (bias.astype(np.int32) << bias_shift)[:, None]
    return acc


def _im2col_np(x: np.ndarray, k: int, s: int, pad: int, m_padded: int) -> np.ndarray:
    h, w, c = x.shape
    h_out = (h + 2 * pad - k) // s + 1
    w_out = (w + 2 * pad - k) // s + 1
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=np.int8)
    xp[pad : pad + h, pad : pad + w] = x
    sh, sw, sc = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(h_out, w_out, k, k, c),
        strides=(s * sh, s * sw, sh, sw, sc),
        writeable=False,
    )
    m = k * k * c
    out = np.zeros((m_padded, h_out * w_out), dtype=np.int8)
    out[:m] = patches.reshape(h_out * w_out, m).T
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _gemm_i32_nb(w, x, bias, bias_shift):  # pragma: no cover - exercised via dispatch
        n, m = w.shape
        p = x.shape[1]
        acc = np.empty((n, p), dtype=np.int32)
        for i in range(n):
            base = np.int32(bias[i]) << bias_shift
            for j in range(p):
                t = base
                for kk in range(m):
                    t += np.int32(w[i, kk]) * np.int32(x[kk, j])
                acc[i, j] = t
        return acc

    @njit(cache=True)
    def _im2col_nb(x, k, s, pad, m_padded):  # pragma: no cover - exercised via dispatch
        h, w, c = x.shape
        h_out = (h + 2 * pad - k) // s + 1
        w_out = (w + 2 * pad - k) // s + 1
        out = np.zeros((m_padded, h_out * w_out), dtype=np.int8)
        for oh in range(h_out):
            for ow in range(w_out):
                col = oh * w_out + ow
                r = 0
                for kh in range(k):
                    ih = oh * s - pad + kh
                    for kw in range(k):
                        iw = ow * s - pad + kw
                        if 0 <= ih < h and 0 <= iw < w:
                            for ch in range(c):
                                out[r + ch, col] = x[ih, iw, ch]
                        r += c
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


class _Impl:
    def __init__(self, gemm, im2col, name):
        self.gemm_i32 = gemm
        self.im2col_i8 = im2col
        self.name = name


numpy_impl = _Impl(_gemm_i32_np, _im2col_np, "numpy")
numba_impl = _Impl(_gemm_i32_nb, _im2col_nb, "numba") if _HAVE_NUMBA else None

_active = numba_impl if USE_NUMBA else numpy_impl


def gemm_i32(w: np.ndarray, x: np.ndarray, bias: np.ndarray, bias_shift: int) -> np.ndarray:
    """INT8 x INT8 -> INT32 GEMM with a left-shifted int8 bias per row."""
    return _active.gemm_i32(
        np.ascontiguousarray(w, dtype=np.int8),
        np.ascontiguousarray(x, dtype=np.int8),
        np.ascontiguousarray(bias, dtype=np.int8),
        bias_shift,
    )


def im2col_i8(x: np.ndarray, k: int, s: int, pad: int, m_padded: int) -> np.ndarray:
    """Gather conv patches into an (m_padded, h_out*w_out) int8 matrix.

    Column j holds the patch of output pixel j (row-major), elements ordered
    (kh, kw, c) with channel fastest; padding and alignment rows are zero.
    """
    return _active.im2col_i8(np.ascontiguousarray(x, dtype=np.int8), k, s, pad, m_padded)
