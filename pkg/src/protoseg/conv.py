"""Backend dispatch for the 3D conv kernels.

Default is the numba-jitted backend; set ``PROTOSEG_BACKEND=numpy`` to force
the pure-numpy fallback (or ``numba`` to require numba and fail loudly).
"""

from __future__ import annotations

import os

import numpy as np

from . import _conv_numpy

_requested = os.environ.get("PROTOSEG_BACKEND", "").lower()

if _requested in ("", "numba"):
    try:
        from . import _conv_numba as _impl

        _backend = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _conv_numpy
        _backend = "numpy"
elif _requested == "numpy":
    _impl = _conv_numpy
    _backend = "numpy"
else:
    raise ValueError(f"unknown PROTOSEG_BACKEND {_requested!r}")


def backend_name() -> str:
    return _backend


def _check_shapes(x, k, b):
    if x.ndim != 4:
        raise ValueError(f"conv3d input must be 4D (Cin,H,W,D), got {x.ndim}D")
    if k.ndim != 5:
        raise ValueError(f"conv3d kernel must be 5D (Cout,Cin,3,3,3), got {k.ndim}D")
    for ax in (2, 3, 4):
        if k.shape[ax] != 3:
            raise ValueError(f"conv3d kernel axis {ax} must have size 3, got {k.shape[ax]}")
    if k.shape[1] != x.shape[0]:
        raise ValueError(
            f"channel mismatch: input axis 0 has {x.shape[0]}, kernel axis 1 has {k.shape[1]}"
        )
    if b.shape != (k.shape[0],):
        raise ValueError(f"bias axis 0 must have size {k.shape[0]}, got {b.shape}")


def conv3d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding 3x3x3 conv: (Cin,H,W,D) -> (Cout,H,W,D)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(x, k, b)
    return _impl.conv3d_forward(x, k, b)


def conv3d_backward(x, k, gy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, kernel, bias given upstream gradient gy."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    _check_shapes(x, k, np.zeros(k.shape[0]))
    if gy.shape != (k.shape[0],) + x.shape[1:]:
        raise ValueError(
            f"upstream gradient shape {gy.shape} does not match output "
            f"shape {(k.shape[0],) + x.shape[1:]}"
        )
    return _impl.conv3d_backward(x, k, gy)


# Cached-cols interface for the training loop: im2col once per layer call,
# reuse the patch matrix in the backward pass.


def conv3d_forward_cols(x, k, b):
    """Returns (y, cols); cols feeds conv3d_backward_cols."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(x, k, b)
    cols = _impl.im2col(x)
    return _impl.forward_from_cols(cols, k, b, x.shape[1:]), cols


def conv3d_backward_cols(cols, k, gy, x_shape, need_gx=True):
    """Backward from a cached cols matrix; gx is None when need_gx is False."""
    return _impl.backward_from_cols(
        cols, np.asarray(k, dtype=np.float64), np.asarray(gy, dtype=np.float64),
        x_shape, need_gx=need_gx,
    )
