"""Per-class prototype bank: k-means init, assignment, filtering, momentum updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import COSINE_EPS


@dataclass
class PrototypeBank:
    """K prototype vectors per class, updated only by momentum_update."""

    vectors: np.ndarray  # (C, K, d)
    eta: float

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3:
            raise ValueError("prototype bank must have shape (C, K, d)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("prototype bank contains non-finite values")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("momentum coefficient must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def protos_per_class(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def flat(self) -> np.ndarray:
        c, k, d = self.vectors.shape
        return self.vectors.reshape(c * k, d)


@dataclass
class Assignment:
    """Nearest-prototype assignment of one or more embeddings.

    Leading axes follow the input z; argmax ties resolve to the lowest index.
    """

    class_index: np.ndarray  # (...,) best class
    proto_index: np.ndarray  # (...,) best prototype within that class
    class_best_sim: np.ndarray  # (..., C) best-of-K cosine sim per class
    class_best_k: np.ndarray  # (..., C) index of that best prototype


def _unit(a: np.ndarray, axis=-1) -> np.ndarray:
    n = np.linalg.norm(a, axis=axis, keepdims=True)
    return a / np.maximum(n, COSINE_EPS)


def class_similarities(z: np.ndarray, bank: PrototypeBank):
    """Cosine sims (..., C, K) between embeddings and every prototype."""
    zn = _unit(np.asarray(z, dtype=np.float64))
    pn = _unit(bank.vectors)
    return np.einsum("...d,ckd->...ck", zn, pn)


def assign(z: np.ndarray, bank: PrototypeBank) -> Assignment:
    sims = class_similarities(z, bank)
    best_k = sims.argmax(axis=-1)
    best_sim = np.take_along_axis(sims, best_k[..., None], axis=-1)[..., 0]
    cstar = best_sim.argmax(axis=-1)
    kstar = np.take_along_axis(best_k, cstar[..., None], axis=-1)[..., 0]
    return Assignment(
        class_index=cstar,
        proto_index=kstar,
        class_best_sim=best_sim,
        class_best_k=best_k,
    )


def confidence_filter(
    probs: np.ndarray, labeled_mask: np.ndarray, alpha: float
) -> np.ndarray:
    """Keep mask: labeled voxels always, unlabeled iff max pseudo-prob > alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("confidence threshold must be in [0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    if probs.shape[:-1] != labeled_mask.shape:
        raise ValueError("probs/labeled_mask length mismatch")
    return labeled_mask | (probs.max(axis=-1) > alpha)


def cluster_stats(
    emb: np.ndarray, classes: np.ndarray, protos: np.ndarray, num_classes: int, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mean embedding and member count per (class, prototype) cluster.

    Returns (means (C, K, d) with zeros for empty clusters, counts (C, K)).
    """
    emb = np.asarray(emb, dtype=np.float64).reshape(-1, np.asarray(emb).shape[-1])
    flat = np.asarray(classes).ravel() * k + np.asarray(protos).ravel()
    counts = np.bincount(flat, minlength=num_classes * k).astype(np.int64)
    sums = np.zeros((num_classes * k, emb.shape[1]))
    np.add.at(sums, flat, emb)
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    d = emb.shape[1]
    return means.reshape(num_classes, k, d), counts.reshape(num_classes, k)


def momentum_update(
    bank: PrototypeBank, means: np.ndarray, counts: np.ndarray
) -> PrototypeBank:
    """p <- eta * p + (1 - eta) * cluster mean; empty clusters untouched."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape != bank.vectors.shape or counts.shape != bank.vectors.shape[:2]:
        raise ValueError("cluster stats shape does not match bank")
    moved = bank.eta * bank.vectors + (1.0 - bank.eta) * means
    vectors = np.where((counts > 0)[..., None], moved, bank.vectors)
    return PrototypeBank(vectors=vectors, eta=bank.eta)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
        else:
            centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def minibatch_kmeans(
    points: np.ndarray,
    k: int,
    batch_size: int = 256,
    iters: int = 10,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Mini-batch k-means: k-means++ seeding, per-center 1/count learning rates."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    if rng is None:
        rng = np.random.default_rng()
    centers = _kmeans_pp_seed(points, k, rng)
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iters):
        idx = rng.permutation(n)[:batch_size] if batch_size < n else np.arange(n)
        batch = points[idx]
        d2 = ((batch[:, None, :] - centers[None]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        for x, c in zip(batch, nearest):
            counts[c] += 1
            centers[c] += (x - centers[c]) / counts[c]
    return centers


def init_kmeans(
    per_class_embeddings: dict[int, np.ndarray],
    k: int,
    eta: float,
    batch_size: int = 256,
    iters: int = 10,
    seed: int = 0,
) -> PrototypeBank:
    """Bank from per-class mini-batch k-means over voxel embeddings."""
    rng = np.random.default_rng(seed)
    classes = sorted(per_class_embeddings)
    if classes != list(range(len(classes))):
        raise ValueError("per-class embeddings must cover classes 0..C-1")
    vectors = []
    for c in classes:
        pts = np.asarray(per_class_embeddings[c], dtype=np.float64)
        if pts.shape[0] < k:
            raise ValueError(f"class {c} supplies {pts.shape[0]} embeddings, need >= {k}")
        vectors.append(minibatch_kmeans(pts, k, batch_size, iters, rng))
    return PrototypeBank(vectors=np.stack(vectors), eta=eta)
