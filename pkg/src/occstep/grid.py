"""Voxel grids, the metric coordinate model, and tiled Morton linearization.

Array layout follows the (D, H, W) raster convention: depth-major, then rows,
then columns.  Metric axes map as H -> x, W -> y, D -> z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

IGNORE = -1
MORTON_BITS = 21  # per axis; 3 * 21 = 63 bits fits in uint64


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]  # (D, H, W)
    ranges: tuple[float, float, float, float, float, float]  # x_min, x_max, y_min, y_max, z_min, z_max
    flip_y: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        ranges = tuple(float(r) for r in self.ranges)
        if len(ranges) != 6:
            raise ValueError("ranges must hold six values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "ranges", ranges)
        if min(self.voxel_size) <= 0:
            raise ValueError(f"ranges {ranges} give non-positive voxel size")

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        """(dx, dy, dz) in meters."""
        D, H, W = self.dims
        x0, x1, y0, y1, z0, z1 = self.ranges
        return ((x1 - x0) / H, (y1 - y0) / W, (z1 - z0) / D)

    @property
    def num_voxels(self) -> int:
        D, H, W = self.dims
        return D * H * W

    def centers(self) -> np.ndarray:
        """Metric centers of every voxel, shape (D, H, W, 3)."""
        D, H, W = self.dims
        d, h, w = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
        return index_to_metric(self, np.stack([d, h, w], axis=-1).astype(np.float64))


def desk_geometry(dims=(16, 32, 32), voxel=0.4) -> GridGeometry:
    """Ego-centred grid with cubic voxels; z starts one meter below the sensor."""
    D, H, W = dims
    return GridGeometry(dims, (-H * voxel / 2, H * voxel / 2, -W * voxel / 2, W * voxel / 2,
                               -1.0, -1.0 + D * voxel))


def full_scale_geometry() -> GridGeometry:
    return GridGeometry((16, 200, 200), (-40.0, 40.0, -40.0, 40.0, -1.0, 5.4))


def index_to_metric(g: GridGeometry, idx: np.ndarray) -> np.ndarray:
    """Map (..., 3) fractional (d, h, w) indices to (..., 3) metric (x, y, z) positions."""
    dx, dy, dz = g.voxel_size
    x0, x1, y0, y1, z0, _ = g.ranges
    idx = np.asarray(idx, dtype=np.float64)
    x = x0 + (idx[..., 1] + 0.5) * dx
    y = y0 + (idx[..., 2] + 0.5) * dy
    z = z0 + (idx[..., 0] + 0.5) * dz
    if g.flip_y:
        y = (y0 + y1) - y
    return np.stack([x, y, z], axis=-1)


def metric_to_index(g: GridGeometry, pts: np.ndarray) -> np.ndarray:
    """Inverse of index_to_metric: (..., 3) metric points to fractional (d, h, w)."""
    dx, dy, dz = g.voxel_size
    x0, x1, y0, y1, z0, _ = g.ranges
    pts = np.asarray(pts, dtype=np.float64)
    y = pts[..., 1]
    if g.flip_y:
        y = (y0 + y1) - y
    h = (pts[..., 0] - x0) / dx - 0.5
    w = (y - y0) / dy - 0.5
    d = (pts[..., 2] - z0) / dz - 0.5
    return np.stack([d, h, w], axis=-1)


def voxel_center(g: GridGeometry, idx: tuple[int, int, int]) -> tuple[float, float, float]:
    for i, n in zip(idx, g.dims):
        if not 0 <= i < n:
            raise IndexError(f"voxel index {idx} outside grid {g.dims}")
    x, y, z = index_to_metric(g, np.array(idx, dtype=np.float64))
    return float(x), float(y), float(z)


@dataclass(frozen=True)
class SemanticOccGrid:
    labels: np.ndarray  # int, (D, H, W), -1 = ignore, 0 = empty
    num_classes: int
    geometry: GridGeometry | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {labels.shape}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < IGNORE or labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [-1, {self.num_classes})")
        if self.geometry is not None and labels.shape != self.geometry.dims:
            raise ValueError(f"labels shape {labels.shape} != geometry dims {self.geometry.dims}")
        labels = labels.astype(np.int16, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self):
        return self.labels.shape

    def occupied(self) -> np.ndarray:
        return self.labels > 0

    def with_labels(self, labels: np.ndarray) -> "SemanticOccGrid":
        return SemanticOccGrid(labels, self.num_classes, self.geometry)


# ---------------------------------------------------------------- Morton order

_SPREAD_STEPS = tuple((np.uint64(shift), np.uint64(mask)) for shift, mask in (
    (32, 0x1F00000000FFFF), (16, 0x1F0000FF0000FF), (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3), (2, 0x1249249249249249)))


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits (shift-and-mask ladder)."""
    v = v.astype(np.uint64) & np.uint64((1 << MORTON_BITS) - 1)
    for shift, mask in _SPREAD_STEPS:
        v = (v | (v << shift)) & mask
    return v


def morton_key(x, y, z):
    """Interleave bits with x least significant: bit i of x -> 3i, y -> 3i+1, z -> 3i+2.

    Accepts python ints (returns int) or integer arrays (returns uint64 array).
    """
    if all(isinstance(v, (int, np.integer)) for v in (x, y, z)):
        if min(x, y, z) < 0:
            raise ValueError("morton_key needs non-negative coordinates")
        key = 0
        for i in range(max(int(x).bit_length(), int(y).bit_length(), int(z).bit_length())):
            key |= ((x >> i) & 1) << (3 * i)
            key |= ((y >> i) & 1) << (3 * i + 1)
            key |= ((z >> i) & 1) << (3 * i + 2)
        return key
    x, y, z = (np.asarray(v) for v in (x, y, z))
    return _spread_bits(x) | (_spread_bits(y) << np.uint64(1)) | (_spread_bits(z) << np.uint64(2))


@dataclass(frozen=True, eq=False)
class Permutation:
    """forward[i] is the raster index visited at sequence position i."""

    forward: np.ndarray
    inverse: np.ndarray
    dims: tuple[int, int, int]
    tile: int = field(default=0)

    @classmethod
    def from_forward(cls, forward, dims, tile=0) -> "Permutation":
        forward = np.asarray(forward, dtype=np.int64)
        L = int(np.prod(dims))
        if forward.shape != (L,):
            raise ValueError(f"forward has shape {forward.shape}, expected ({L},)")
        inverse = np.full(L, -1, dtype=np.int64)
        inverse[forward] = np.arange(L)
        if (inverse < 0).any():
            raise ValueError("forward is not a bijection")
        forward.setflags(write=False)
        inverse.setflags(write=False)
        return cls(forward, inverse, tuple(dims), tile)

    @classmethod
    def identity(cls, dims) -> "Permutation":
        return cls.from_forward(np.arange(int(np.prod(dims))), dims)

    def __len__(self):
        return len(self.forward)


@lru_cache(maxsize=32)
def build_tiled_morton(dims: tuple[int, int, int], tile: int = 8) -> Permutation:
    """Z-order inside T^3 bricks, bricks themselves visited in Z-order.

    Voxel (d, h, w) is keyed as Morton (x=w, y=h, z=d), i.e. the last array axis
    is the fastest-varying bit plane.  Border bricks keep their truncated extent;
    keys of their offsets are sorted as-is, which is the same as Z-order on the
    truncated box.
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    dims = tuple(int(v) for v in dims)
    if min(dims) < 1:
        raise ValueError(f"bad dims {dims}")
    D, H, W = dims
    d, h, w = (a.ravel() for a in np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij"))
    brick_key = morton_key(w // tile, h // tile, d // tile)
    local_key = morton_key(w % tile, h % tile, d % tile)
    forward = np.lexsort((local_key, brick_key))
    return Permutation.from_forward(forward, dims, tile)


def global_morton(dims) -> Permutation:
    D, H, W = dims
    return build_tiled_morton(tuple(dims), max(D, H, W))


def _check(seq_len: int, p: Permutation):
    if seq_len != len(p):
        raise ValueError(f"length {seq_len} does not match permutation of length {len(p)}")


def apply_permutation(grid_features: np.ndarray, p: Permutation) -> np.ndarray:
    """(C, D, H, W) feature grid -> (L, C) sequence in permutation order."""
    C = grid_features.shape[0]
    flat = grid_features.reshape(C, -1)
    _check(flat.shape[1], p)
    return flat[:, p.forward].T.copy()


def invert_permutation(seq: np.ndarray, p: Permutation) -> np.ndarray:
    """(L, C) sequence -> (C, D, H, W) grid."""
    _check(seq.shape[0], p)
    return seq[p.inverse].T.reshape((seq.shape[1],) + p.dims).copy()
