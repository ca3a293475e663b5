"""Classification heads and the training losses, with analytic gradients.

Embedding inputs are (..., d) arrays; probability outputs are (..., C).
Voxel-wise losses are averaged, never summed, so values are comparable
across volume sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .prototypes import PrototypeBank, class_similarities

CE_CLAMP = 1e-12
DICE_EPS = 1e-5
RAMP_SCALE = 5.0


@dataclass
class LossBreakdown:
    l_cons_linear: float
    l_cons_proto: float
    l_contrastive: float
    lam: float
    total: float


def ramp_lambda(t: float, ramp_len: float) -> float:
    """Sigmoid-shaped ramp from exp(-5) at t=0 to exactly 1 at t >= ramp_len."""
    if ramp_len < 1:
        raise ValueError("ramp length must be >= 1")
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    frac = min(float(t), float(ramp_len)) / float(ramp_len)
    return float(np.exp(-RAMP_SCALE * (1.0 - frac) ** 2))


def total_loss(
    l_lin: float, l_proto: float, l_cont: float, lam: float, gamma: float
) -> LossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    total = l_lin + lam * (l_proto + gamma * l_cont)
    return LossBreakdown(
        l_cons_linear=float(l_lin),
        l_cons_proto=float(l_proto),
        l_contrastive=float(l_cont),
        lam=float(lam),
        total=float(total),
    )


# ---------------------------------------------------------------------------
# classification heads


def linear_head_forward(z: np.ndarray, w: np.ndarray):
    """softmax(W z): probs (..., C) plus backward cache."""
    logits = ops.linear_forward(z, w)
    probs = ops.softmax_forward(logits)
    return probs, (z, w, probs)


def linear_head_backward(cache, gprobs):
    """Returns (gz, gw)."""
    z, w, probs = cache
    glogits = ops.softmax_backward(probs, gprobs)
    gz, gw, _ = ops.linear_backward(z, w, glogits)
    return gz, gw


def linear_classify(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    probs, _ = linear_head_forward(z, w)
    return probs


def proto_head_forward(z: np.ndarray, bank: PrototypeBank, tau1: float):
    """softmax over per-class best cosine similarity / tau1.

    Gradients flow to z only; prototypes are constants.
    """
    if tau1 <= 0:
        raise ValueError("tau1 must be > 0")
    z = np.asarray(z, dtype=np.float64)
    sims = class_similarities(z, bank)  # (..., C, K)
    best_k = sims.argmax(axis=-1)  # (..., C)
    best_sim = np.take_along_axis(sims, best_k[..., None], axis=-1)[..., 0]
    probs = ops.softmax_forward(best_sim, temperature=tau1)
    return probs, (z, bank, tau1, best_k, best_sim, probs)


def proto_head_backward(cache, gprobs):
    """Returns gz."""
    z, bank, tau1, best_k, best_sim, probs = cache
    gs = ops.softmax_backward(probs, gprobs, temperature=tau1)  # (..., C)
    pn = bank.vectors / np.maximum(
        np.linalg.norm(bank.vectors, axis=-1, keepdims=True), ops.COSINE_EPS
    )
    # selected unit prototype per class: (..., C, d)
    p_sel = np.take_along_axis(
        np.broadcast_to(pn, best_k.shape + pn.shape[1:]),
        best_k[..., None, None],
        axis=-2,
    )[..., 0, :]
    zn = np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), ops.COSINE_EPS)
    zhat = z / zn
    term_p = np.einsum("...c,...cd->...d", gs, p_sel)
    term_z = (gs * best_sim).sum(axis=-1)[..., None] * zhat
    return (term_p - term_z) / zn


def proto_classify(z: np.ndarray, bank: PrototypeBank, tau1: float) -> np.ndarray:
    probs, _ = proto_head_forward(z, bank, tau1)
    return probs


# ---------------------------------------------------------------------------
# voxel-wise losses over probability fields


def _flatten(probs, target, mask):
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[-1]
    p = probs.reshape(-1, c)
    t = np.asarray(target).ravel()
    if t.shape[0] != p.shape[0]:
        raise ValueError("prediction/target voxel counts differ")
    if mask is None:
        m = np.ones(p.shape[0], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape[0] != p.shape[0]:
            raise ValueError("mask voxel count differs from prediction")
    return p, t, m


def ce_loss(probs, target, mask=None) -> float:
    """Mean over (masked) voxels of -log p[target], clamped at 1e-12."""
    p, t, m = _flatten(probs, target, mask)
    pt = np.maximum(p[np.arange(p.shape[0]), t], CE_CLAMP)
    if m.sum() == 0:
        return 0.0
    return float(-np.log(pt[m]).mean())


def ce_grad(probs, target, mask=None) -> np.ndarray:
    p, t, m = _flatten(probs, target, mask)
    g = np.zeros_like(p)
    n = m.sum()
    if n:
        rows = np.arange(p.shape[0])
        pt = np.maximum(p[rows, t], CE_CLAMP)
        g[rows, t] = np.where(m, -1.0 / (pt * n), 0.0)
    return g.reshape(np.asarray(probs).shape)


def _dice_terms(p, t, m, c):
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), t] = 1.0
    pm = p[m]
    gm = onehot[m]
    num = 2.0 * (pm * gm).sum(axis=0) + DICE_EPS  # per class
    den = pm.sum(axis=0) + gm.sum(axis=0) + DICE_EPS
    return onehot, num, den


def dice_loss(probs, target, mask=None) -> float:
    """Soft dice over foreground classes: 1 - mean_c (2*sum(p*g)+eps)/(sum p + sum g + eps)."""
    p, t, m = _flatten(probs, target, mask)
    c = p.shape[1]
    _, num, den = _dice_terms(p, t, m, c)
    return float(1.0 - (num[1:] / den[1:]).mean())


def dice_grad(probs, target, mask=None) -> np.ndarray:
    p, t, m = _flatten(probs, target, mask)
    c = p.shape[1]
    onehot, num, den = _dice_terms(p, t, m, c)
    g = np.zeros_like(p)
    nfg = c - 1
    for cls in range(1, c):
        g[m, cls] = -(2.0 * onehot[m, cls] * den[cls] - num[cls]) / (
            den[cls] ** 2 * nfg
        )
    return g.reshape(np.asarray(probs).shape)


def consistency_loss(probs, target, mask=None) -> float:
    """Cross-entropy plus soft dice against the (mixed) label field."""
    return ce_loss(probs, target, mask) + dice_loss(probs, target, mask)


def consistency_grad(probs, target, mask=None) -> np.ndarray:
    return ce_grad(probs, target, mask) + dice_grad(probs, target, mask)


# ---------------------------------------------------------------------------
# contrastive loss


def contrastive_forward(z: np.ndarray, bank: PrototypeBank, tau2: float):
    """InfoNCE over all C*K prototypes: positives are the cosine-nearest.

    Logits are raw dot products z.p / tau2. Returns (mean loss, cache).
    """
    if tau2 <= 0:
        raise ValueError("tau2 must be > 0")
    z = np.asarray(z, dtype=np.float64)
    lead = z.shape[:-1]
    z2 = z.reshape(-1, z.shape[-1])
    flat = bank.flat()  # (C*K, d)
    sims = class_similarities(z2, bank).reshape(z2.shape[0], -1)
    pos = sims.argmax(axis=1)  # lowest (class, proto) index on ties
    logits = (z2 @ flat.T) / tau2
    shift = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    rows = np.arange(z2.shape[0])
    losses = lse - logits[rows, pos]
    loss = float(losses.mean())
    return loss, (z2, lead, flat, tau2, logits, pos)


def contrastive_backward(cache) -> np.ndarray:
    """Gradient of the mean loss w.r.t. z."""
    z2, lead, flat, tau2, logits, pos = cache
    q = np.exp(logits - logits.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    gz = (q @ flat - flat[pos]) / (tau2 * z2.shape[0])
    return gz.reshape(lead + (flat.shape[1],))


def contrastive_loss(z: np.ndarray, bank: PrototypeBank, tau2: float) -> float:
    loss, _ = contrastive_forward(z, bank, tau2)
    return loss
