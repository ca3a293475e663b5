"""Segmentation quality metrics: Dice, Jaccard, 95HD, ASD (voxel units)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume


@dataclass
class ClassMetrics:
    dice: float
    jaccard: float
    hd95: float | None  # None when either surface is empty
    asd: float | None


@dataclass
class MetricReport:
    per_class: dict[int, ClassMetrics]  # foreground classes only

    def macro(self) -> ClassMetrics:
        ms = list(self.per_class.values())
        hd = [m.hd95 for m in ms if m.hd95 is not None]
        asd = [m.asd for m in ms if m.asd is not None]
        return ClassMetrics(
            dice=float(np.mean([m.dice for m in ms])),
            jaccard=float(np.mean([m.jaccard for m in ms])),
            hd95=float(np.mean(hd)) if hd else None,
            asd=float(np.mean(asd)) if asd else None,
        )


def dice_jaccard(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Overlap ratios for boolean masks; both 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    inter = np.logical_and(pred, gt).sum()
    p, g = pred.sum(), gt.sum()
    union = p + g - inter
    if p + g == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (p + g)
    jaccard = inter / union if union else 1.0
    return float(dice), float(jaccard)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with any of 6 face-neighbors outside (volume border counts)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for ax in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Sorted pooled surface-to-nearest-surface distances, both directions."""
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    if sp.size == 0 or sg.size == 0:
        raise ValueError("surface distances undefined for an empty mask")
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return np.sort(np.concatenate([np.atleast_1d(d_pg), np.atleast_1d(d_gp)]))


def hd95(distances: np.ndarray) -> float:
    """95th percentile by the nearest-rank rule."""
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        raise ValueError("empty distance list")
    idx = int(np.ceil(0.95 * d.size)) - 1
    return float(d[idx])


def asd(distances: np.ndarray) -> float:
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("empty distance list")
    return float(d.mean())


def evaluate(pred: LabelVolume, gt: LabelVolume) -> MetricReport:
    """Per-foreground-class metrics; empty-surface classes flag hd95/asd None."""
    if pred.dims != gt.dims:
        raise ValueError("prediction/ground-truth dims differ")
    if pred.num_classes != gt.num_classes:
        raise ValueError("prediction/ground-truth class counts differ")
    per_class = {}
    for c in range(1, gt.num_classes):
        pm = pred.labels == c
        gm = gt.labels == c
        d, j = dice_jaccard(pm, gm)
        try:
            dists = surface_distances(pm, gm)
            h, a = hd95(dists), asd(dists)
        except ValueError:
            warnings.warn(f"class {c}: empty mask, surface distances undefined")
            h, a = None, None
        per_class[c] = ClassMetrics(dice=d, jaccard=j, hd95=h, asd=a)
    return MetricReport(per_class=per_class)
