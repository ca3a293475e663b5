"""Dense 3D volumes: synthetic data generation, copy-paste mixing, binary I/O.

Arrays are indexed ``[x, y, z]`` with dims ``(H, W, D)``.  The flat voxel
order (in files and anywhere a flat index appears) is x-fastest:
``flat = x + H * (y + W * z)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MPER"
FORMAT_VERSION = 1
KIND_SCALAR = 0
KIND_LABEL = 1
_U32_MAX = 2**32 - 1
_HEADER = struct.Struct("<4sHBH3I")


class VolumeFormatError(Exception):
    """Base class for on-disk volume format problems."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimOverflowError(VolumeFormatError):
    pass


class DegenerateGeometryError(Exception):
    """Synthetic generation could not place a class within its voxel budget."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    """Scalar field over an H x W x D grid, float32 storage."""

    data: np.ndarray  # (H, W, D), indexed [x, y, z]

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", _as_readonly(d))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Integer class field over an H x W x D grid."""

    labels: np.ndarray  # (H, W, D) uint16
    num_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {lab.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if lab.min(initial=0) < 0 or lab.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range for num_classes")
        object.__setattr__(self, "labels", _as_readonly(lab.astype(np.uint16)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class PasteRegion:
    """Axis-aligned box; the source-copied region of a copy-paste mix."""

    origin: tuple[int, int, int]
    extent: tuple[int, int, int]

    def __post_init__(self):
        if any(e < 0 for e in self.extent):
            raise ValueError("region extent components must be >= 0")
        if any(o < 0 for o in self.origin):
            raise ValueError("region origin components must be >= 0")

    def check_bounds(self, dims: tuple[int, int, int]) -> None:
        for o, e, d in zip(self.origin, self.extent, dims):
            if o + e > d:
                raise ValueError(f"paste region {self} out of bounds for dims {dims}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))


@dataclass(frozen=True)
class ShapeParams:
    """Rasterization parameters of one foreground object."""

    kind: str  # sphere | box | blob
    center: tuple[float, float, float]
    size: float  # sphere/blob radius, box half-extent
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)  # blob second-lobe shift


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic (Volume, LabelVolume) pair."""

    dims: tuple[int, int, int]
    num_classes: int
    shapes: tuple[str, ...]  # one kind per foreground class
    means: tuple[float, ...]  # intensity mean per class, background first
    stds: tuple[float, ...] | None = None  # per-class intensity spread
    noise_std: float = 0.0
    seed: int = 0
    min_frac: float = 0.01
    max_frac: float = 0.60

    def __post_init__(self):
        if len(self.shapes) != self.num_classes - 1:
            raise ValueError("need one shape kind per foreground class")
        if len(self.means) != self.num_classes:
            raise ValueError("need one intensity mean per class")
        if len(set(self.means)) != len(self.means):
            raise ValueError("class intensity means must be pairwise distinct")
        if self.noise_std < 0:
            raise ValueError("noise stddev must be >= 0")
        stds = self.stds if self.stds is not None else (0.0,) * self.num_classes
        if len(stds) != self.num_classes:
            raise ValueError("need one intensity stddev per class")
        object.__setattr__(self, "stds", tuple(stds))


def _coord_grids(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def sphere_mask(dims, center, radius) -> np.ndarray:
    gx, gy, gz = _coord_grids(dims)
    cx, cy, cz = center
    return (gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2 <= radius**2


def box_mask(dims, center, half_extent) -> np.ndarray:
    gx, gy, gz = _coord_grids(dims)
    m = np.ones(dims, dtype=bool)
    for g, c in zip((gx, gy, gz), center):
        m &= np.abs(g - c) <= half_extent
    return m


def blob_mask(dims, center, radius, offset) -> np.ndarray:
    second = tuple(c + o for c, o in zip(center, offset))
    return sphere_mask(dims, center, radius) | sphere_mask(dims, second, radius)


def shape_mask(dims, shape: ShapeParams) -> np.ndarray:
    if shape.kind == "sphere":
        return sphere_mask(dims, shape.center, shape.size)
    if shape.kind == "box":
        return box_mask(dims, shape.center, shape.size)
    if shape.kind == "blob":
        return blob_mask(dims, shape.center, shape.size, shape.offset)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _draw_shape(kind, dims, rng) -> ShapeParams:
    dims_arr = np.asarray(dims, dtype=np.float64)
    # Center in the middle 50% of each axis so objects stay mostly in-volume.
    center = tuple(rng.uniform(0.3 * d, 0.7 * d) for d in dims_arr)
    lo, hi = 0.12 * dims_arr.min(), 0.30 * dims_arr.min()
    size = rng.uniform(lo, hi)
    offset = tuple(rng.uniform(-size, size) for _ in range(3))
    return ShapeParams(kind=kind, center=center, size=size, offset=offset)


def rasterize_labels(dims, shapes: list[ShapeParams]) -> np.ndarray:
    """Paint shapes in class order; later classes overwrite earlier ones."""
    labels = np.zeros(dims, dtype=np.uint16)
    for c, shape in enumerate(shapes, start=1):
        labels[shape_mask(dims, shape)] = c
    return labels


def generate_synthetic_with_shapes(
    spec: SyntheticSpec,
) -> tuple[Volume, LabelVolume, list[ShapeParams]]:
    rng = np.random.default_rng(spec.seed)
    n_vox = int(np.prod(spec.dims))
    labels = None
    shapes: list[ShapeParams] = []
    for _ in range(10):
        shapes = [_draw_shape(kind, spec.dims, rng) for kind in spec.shapes]
        cand = rasterize_labels(spec.dims, shapes)
        counts = np.bincount(cand.ravel(), minlength=spec.num_classes)
        fracs = counts[1:] / n_vox
        if np.all(fracs >= spec.min_frac) and np.all(fracs <= spec.max_frac):
            labels = cand
            break
    if labels is None:
        raise DegenerateGeometryError(
            f"no valid geometry for spec seed={spec.seed} after 10 attempts"
        )
    means = np.asarray(spec.means, dtype=np.float64)
    stds = np.asarray(spec.stds, dtype=np.float64)
    data = means[labels]
    if np.any(stds > 0):
        data = data + rng.normal(0.0, 1.0, size=spec.dims) * stds[labels]
    if spec.noise_std > 0:
        data = data + rng.normal(0.0, spec.noise_std, size=spec.dims)
    vol = Volume(data.astype(np.float32))
    lab = LabelVolume(labels, spec.num_classes)
    return vol, lab, shapes


def generate_synthetic(spec: SyntheticSpec) -> tuple[Volume, LabelVolume]:
    vol, lab, _ = generate_synthetic_with_shapes(spec)
    return vol, lab


def sample_paste_region(dims, ratio: float, rng: np.random.Generator) -> PasteRegion:
    if not 0.0 < ratio <= 1.0:
        raise ValueError("paste ratio must be in (0, 1]")
    extent = tuple(int(np.round(ratio * d)) for d in dims)
    origin = tuple(int(rng.integers(0, d - e + 1)) for d, e in zip(dims, extent))
    return PasteRegion(origin=origin, extent=extent)


def copy_paste_mix(
    src: Volume,
    src_lab: LabelVolume,
    dst: Volume,
    dst_lab: LabelVolume,
    region: PasteRegion,
) -> tuple[Volume, LabelVolume]:
    """Copy ``region`` of src into dst; inputs untouched."""
    if src.dims != dst.dims:
        raise ValueError(f"dims mismatch: src {src.dims} vs dst {dst.dims}")
    if src_lab.dims != src.dims or dst_lab.dims != dst.dims:
        raise ValueError("label dims do not match volume dims")
    if src_lab.num_classes != dst_lab.num_classes:
        raise ValueError("num_classes mismatch between label volumes")
    region.check_bounds(src.dims)
    sl = region.slices()
    data = dst.data.copy()
    data[sl] = src.data[sl]
    labels = dst_lab.labels.copy()
    labels[sl] = src_lab.labels[sl]
    return Volume(data), LabelVolume(labels, dst_lab.num_classes)


def mix_labels(
    src_lab: LabelVolume, dst_lab: LabelVolume, region: PasteRegion
) -> LabelVolume:
    """Label-only copy-paste with the same region semantics as copy_paste_mix."""
    if src_lab.dims != dst_lab.dims:
        raise ValueError("dims mismatch between label volumes")
    if src_lab.num_classes != dst_lab.num_classes:
        raise ValueError("num_classes mismatch between label volumes")
    region.check_bounds(src_lab.dims)
    labels = dst_lab.labels.copy()
    labels[region.slices()] = src_lab.labels[region.slices()]
    return LabelVolume(labels, dst_lab.num_classes)


def write_volume(path, vol: Volume | LabelVolume) -> None:
    dims = vol.dims
    if any(d > _U32_MAX for d in dims):
        raise DimOverflowError(f"dims {dims} exceed u32 range")
    if isinstance(vol, LabelVolume):
        kind, num_classes = KIND_LABEL, vol.num_classes
        payload = vol.labels.astype("<u2").ravel(order="F").tobytes()
    else:
        kind, num_classes = KIND_SCALAR, 0
        payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, num_classes, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path) -> Volume | LabelVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, kind, num_classes, h, w, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    n = h * w * d
    payload = raw[_HEADER.size :]
    if kind == KIND_SCALAR:
        if len(payload) != 4 * n:
            raise TruncatedPayloadError(
                f"{path}: expected {4 * n} payload bytes, got {len(payload)}"
            )
        data = np.frombuffer(payload, dtype="<f4").reshape((h, w, d), order="F")
        return Volume(data)
    if kind == KIND_LABEL:
        if len(payload) != 2 * n:
            raise TruncatedPayloadError(
                f"{path}: expected {2 * n} payload bytes, got {len(payload)}"
            )
        labels = np.frombuffer(payload, dtype="<u2").reshape((h, w, d), order="F")
        return LabelVolume(labels, num_classes)
    raise VolumeFormatError(f"{path}: unknown payload kind {kind}")
