"""Elementwise / dense math with explicit analytic backward passes.

Everything operates on plain float64 numpy arrays. Checkpoints store
float32 (see save_weights / load_weights).
"""

from __future__ import annotations

import struct

import numpy as np

from .conv import conv3d_backward, conv3d_forward  # noqa: F401  (re-exported)

COSINE_EPS = 1e-8

WEIGHTS_MAGIC = b"MPWT"
WEIGHTS_VERSION = 1

# Debug hook: scales linear-layer input gradients so selftest can prove it
# detects a corrupted backward. Leave at 1.0 outside fault-injection runs.
_fault_scale = 1.0


def set_fault_scale(scale: float) -> None:
    global _fault_scale
    _fault_scale = scale


class NonFiniteError(FloatingPointError):
    pass


def check_finite(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {name}")
    return a


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return np.where(x > 0.0, gy, 0.0)


def linear_forward(x, w, b=None):
    """x: (..., din), w: (dout, din) -> (..., dout)."""
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, gy):
    """Returns (gx, gw, gb)."""
    gx = (gy @ w) * _fault_scale
    gw = np.tensordot(gy, x, axes=(tuple(range(gy.ndim - 1)),) * 2)
    gb = gy.sum(axis=tuple(range(gy.ndim - 1)))
    return gx, gw, gb


def softmax_forward(logits, temperature=1.0, axis=-1):
    if temperature <= 0:
        raise ValueError("softmax temperature must be > 0")
    z = logits / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, gprobs, temperature=1.0, axis=-1):
    """Gradient w.r.t. the pre-temperature logits."""
    inner = gprobs - (gprobs * probs).sum(axis=axis, keepdims=True)
    return probs * inner / temperature


def cosine_sim(a, b, eps=COSINE_EPS):
    na = max(float(np.linalg.norm(a)), eps)
    nb = max(float(np.linalg.norm(b)), eps)
    return float(np.dot(a, b)) / (na * nb)


def cosine_sim_backward(a, b, gout, eps=COSINE_EPS):
    """Gradient w.r.t. a only (b treated as constant)."""
    na = max(float(np.linalg.norm(a)), eps)
    nb = max(float(np.linalg.norm(b)), eps)
    sim = float(np.dot(a, b)) / (na * nb)
    return gout * (b / (na * nb) - sim * a / (na * na))


def sgd_step(params, grads, lr):
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        out.append(p - lr * g)
    return out


def fd_check(loss_fn, inputs, eps=1e-4):
    """Max relative error between analytic gradients and central differences.

    loss_fn(inputs) must return (scalar_loss, [grad per input]).
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps out of the supported [1e-6, 1e-2] range")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, grads = loss_fn(inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        flat = x.ravel()
        g = np.asarray(grads[i], dtype=np.float64).ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp, _ = loss_fn(inputs)
            flat[j] = orig - eps
            fm, _ = loss_fn(inputs)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-4)
            worst = max(worst, err)
    return worst


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<HI", WEIGHTS_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(Exception):
    pass


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    version, count = struct.unpack_from("<HI", raw, off)
    off += 6
    if version != WEIGHTS_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            payload = raw[off : off + 4 * n]
            if len(payload) != 4 * n:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
            )
            off += 4 * n
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return tensors
