"""Hot numeric kernels: patch extraction for convolution and its adjoint.

Two implementations of each kernel live here. The numba versions are used
when numba imports cleanly and ``SEWLAB_NUMBA`` is not set to ``0``; the
pure-numpy versions are the fallback. Both accumulate in the same order,
so their outputs agree bit-for-bit.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional at runtime
    HAVE_NUMBA = False


def _numba_requested():
    flag = os.environ.get("SEWLAB_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# --------------------------------------------------------------------------
# numpy reference path


def im2col_numpy(x, k):
    """[N, C, H, W] -> [N*H*W, C*k*k] for a stride-1 'same' convolution."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: [N, C, H, W, k, k] -> [N, H, W, C, k, k]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * k * k)


def col2im_numpy(cols, shape, k):
    n, c, h, w = shape
    pad = k // 2
    g = cols.reshape(n, h, w, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + h, dj:dj + w] += g[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + h, pad:pad + w]


# --------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k):
        n, c, h, w = x.shape
        pad = k // 2
        out = np.zeros((n * h * w, c * k * k), dtype=x.dtype)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    col = 0
                    for ch in range(c):
                        for di in range(k):
                            ii = i + di - pad
                            for dj in range(k):
                                jj = j + dj - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    out[row, col] = x[b, ch, ii, jj]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k):
        pad = k // 2
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        # same (di, dj) outer order as the numpy path: identical rounding
        for di in range(k):
            for dj in range(k):
                for b in range(n):
                    for i in range(h):
                        ii = i + di - pad
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(w):
                            jj = j + dj - pad
                            if jj < 0 or jj >= w:
                                continue
                            row = (b * h + i) * w + j
                            for ch in range(c):
                                out[b, ch, ii, jj] += cols[row, (ch * k + di) * k + dj]
        return out

    def im2col_numba(x, k):
        return _im2col_nb(np.ascontiguousarray(x), k)

    def col2im_numba(cols, shape, k):
        n, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k)


def use_numba():
    return HAVE_NUMBA and _numba_requested()


def backend_name():
    return "numba" if use_numba() else "numpy"


def im2col(x, k):
    if use_numba():
        return im2col_numba(x, k)
    return im2col_numpy(x, k)


def col2im(cols, shape, k):
    if use_numba():
        return col2im_numba(cols, shape, k)
    return col2im_numpy(cols, shape, k)
