"""Pure-numpy 3x3x3 same-padding conv kernels (fallback backend).

im2col + GEMM formulation; accumulation is float64 throughout. The cols
matrix can be cached between forward and backward (see conv.py).
"""

from __future__ import annotations

import numpy as np

_OFFSETS = [(i, j, l) for i in range(3) for j in range(3) for l in range(3)]


def im2col(x: np.ndarray) -> np.ndarray:
    """(Cin, H, W, D) -> (Cin*27, H*W*D) patch matrix, zero padding 1."""
    cin, h, w, d = x.shape
    n = h * w * d
    xp = np.zeros((cin, h + 2, w + 2, d + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((cin, 27, n), dtype=np.float64)
    for idx, (i, j, l) in enumerate(_OFFSETS):
        cols[:, idx, :] = xp[:, i : i + h, j : j + w, l : l + d].reshape(cin, n)
    return cols.reshape(cin * 27, n)


def col2im(gcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back onto the grid."""
    cin, h, w, d = shape
    n = h * w * d
    gxp = np.zeros((cin, h + 2, w + 2, d + 2), dtype=np.float64)
    g3 = gcols.reshape(cin, 27, n)
    for idx, (i, j, l) in enumerate(_OFFSETS):
        gxp[:, i : i + h, j : j + w, l : l + d] += g3[:, idx, :].reshape(cin, h, w, d)
    return np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1])


def forward_from_cols(cols: np.ndarray, k: np.ndarray, b: np.ndarray, out_shape):
    cout = k.shape[0]
    y = k.reshape(cout, -1) @ cols + b[:, None]
    return y.reshape((cout,) + out_shape)


def backward_from_cols(cols, k, gy, x_shape, need_gx=True):
    cout = k.shape[0]
    gy_flat = gy.reshape(cout, -1)
    gk = (gy_flat @ cols.T).reshape(k.shape)
    gb = gy_flat.sum(axis=1)
    gx = None
    if need_gx:
        gcols = k.reshape(cout, -1).T @ gy_flat
        gx = col2im(gcols, x_shape)
    return gx, gk, gb


def conv3d_forward(x, k, b):
    return forward_from_cols(im2col(x), k, b, x.shape[1:])


def conv3d_backward(x, k, gy):
    gx, gk, gb = backward_from_cols(im2col(x), k, gy, x.shape, need_gx=True)
    return gx, gk, gb
