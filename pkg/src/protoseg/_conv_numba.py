"""Numba-jitted 3x3x3 same-padding conv kernels (default backend).

Same im2col + GEMM structure as the numpy fallback; the patch
gather/scatter loops are jitted, the GEMMs go through np.dot (BLAS).
Loop order is fixed, so results are deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _gather(xp, cols, h, w, d):
    cin = xp.shape[0]
    for ci in range(cin):
        for i in range(3):
            for j in range(3):
                for l in range(3):
                    idx = ci * 27 + i * 9 + j * 3 + l
                    v = 0
                    for ix in range(h):
                        for iy in range(w):
                            row = xp[ci, ix + i]
                            for iz in range(d):
                                cols[idx, v] = row[iy + j, iz + l]
                                v += 1


@njit(cache=True)
def _scatter(gcols, gxp, h, w, d):
    cin = gxp.shape[0]
    for ci in range(cin):
        for i in range(3):
            for j in range(3):
                for l in range(3):
                    idx = ci * 27 + i * 9 + j * 3 + l
                    v = 0
                    for ix in range(h):
                        for iy in range(w):
                            row = gxp[ci, ix + i]
                            for iz in range(d):
                                row[iy + j, iz + l] += gcols[idx, v]
                                v += 1


def im2col(x: np.ndarray) -> np.ndarray:
    """(Cin, H, W, D) -> (Cin*27, H*W*D) patch matrix, zero padding 1."""
    cin, h, w, d = x.shape
    xp = np.zeros((cin, h + 2, w + 2, d + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((cin * 27, h * w * d), dtype=np.float64)
    _gather(xp, cols, h, w, d)
    return cols


def col2im(gcols: np.ndarray, shape) -> np.ndarray:
    cin, h, w, d = shape
    gxp = np.zeros((cin, h + 2, w + 2, d + 2), dtype=np.float64)
    _scatter(np.ascontiguousarray(gcols), gxp, h, w, d)
    return np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1])


def forward_from_cols(cols, k, b, out_shape):
    cout = k.shape[0]
    y = np.dot(np.ascontiguousarray(k.reshape(cout, -1)), cols) + b[:, None]
    return y.reshape((cout,) + out_shape)


def backward_from_cols(cols, k, gy, x_shape, need_gx=True):
    cout = k.shape[0]
    gy_flat = np.ascontiguousarray(gy.reshape(cout, -1))
    gk = np.dot(gy_flat, cols.T).reshape(k.shape)
    gb = gy_flat.sum(axis=1)
    gx = None
    if need_gx:
        gcols = np.dot(np.ascontiguousarray(k.reshape(cout, -1)).T, gy_flat)
        gx = col2im(gcols, x_shape)
    return gx, gk, gb


def conv3d_forward(x, k, b):
    return forward_from_cols(im2col(x), k, b, x.shape[1:])


def conv3d_backward(x, k, gy):
    gx, gk, gb = backward_from_cols(im2col(x), k, gy, x.shape, need_gx=True)
    return gx, gk, gb
