"""Loop-heavy convolution kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one. The
numba path is used when numba imports and ``FEDDM_DISABLE_NUMBA`` is unset
(or "0"). Both paths produce bit-identical results: im2col is a pure copy
and col2im accumulates in the same (ki, kj) order in both.
"""
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    HAS_NUMBA = False

_DISABLED = os.environ.get("FEDDM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = HAS_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def _out_size(size, k, pad):
    return size + 2 * pad - k + 1


def im2col_numpy(x, kh, kw, pad):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patches for a stride-1 convolution."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = _out_size(h, kh, pad), _out_size(w, kw, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im_numpy(cols, x_shape, kh, kw, pad):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = x_shape
    ho, wo = _out_size(h, kh, pad), _out_size(w, kw, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_loop(x, kh, kw, pad, out):
        n, c, h, w = x.shape
        ho = h + 2 * pad - kh + 1
        wo = w + 2 * pad - kw + 1
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy + i - pad
                            for ox in range(wo):
                                ix = ox + j - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[b, row, oy * wo + ox] = x[b, ch, iy, ix]
                                else:
                                    out[b, row, oy * wo + ox] = 0.0

    @njit(cache=True)
    def _col2im_loop(cols, kh, kw, pad, out):
        n, c, h, w = out.shape
        ho = h + 2 * pad - kh + 1
        wo = w + 2 * pad - kw + 1
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox + j - pad
                                if 0 <= ix < w:
                                    out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]

    def im2col_numba(x, kh, kw, pad):
        n, c, h, w = x.shape
        ho, wo = _out_size(h, kh, pad), _out_size(w, kw, pad)
        out = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
        _im2col_loop(np.ascontiguousarray(x), kh, kw, pad, out)
        return out

    def col2im_numba(cols, x_shape, kh, kw, pad):
        out = np.zeros(x_shape, dtype=cols.dtype)
        _col2im_loop(np.ascontiguousarray(cols), kh, kw, pad, out)
        return out

else:  # pragma: no cover
    im2col_numba = None
    col2im_numba = None


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
