"""Rigid motions and state warping.

Poses are plain 4x4 float64 arrays.  Relative motion between absolute poses a
and b is ``inv(T_a) @ T_b``: it maps points expressed in frame b into frame a,
and its planar part is the ego displacement measured in frame a.  Re-anchoring
a voxel field from frame a into frame b therefore samples with the frame-change
map ``inv(T_a @ ... )``; see :func:`reanchor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .grid import GridGeometry, index_to_metric, metric_to_index

F_REFLECT = np.diag([1.0, -1.0, 1.0, 1.0])


def wrap_angle(psi):
    """Wrap to (-pi, pi].  Works on floats and arrays."""
    out = -(np.mod(-np.asarray(psi, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PlanarMotion:
    d_x: float
    d_y: float
    d_psi: float

    def __post_init__(self):
        vals = (self.d_x, self.d_y, self.d_psi)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"non-finite planar motion {vals}")
        object.__setattr__(self, "d_x", float(self.d_x))
        object.__setattr__(self, "d_y", float(self.d_y))
        object.__setattr__(self, "d_psi", wrap_angle(float(self.d_psi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.d_x, self.d_y, self.d_psi])

    @classmethod
    def zero(cls) -> "PlanarMotion":
        return cls(0.0, 0.0, 0.0)


def identity() -> np.ndarray:
    return np.eye(4)


def se2_to_se3(m: PlanarMotion | tuple) -> np.ndarray:
    """Yaw about z plus an in-plane translation."""
    if not isinstance(m, PlanarMotion):
        m = PlanarMotion(*m)
    c, s = math.cos(m.d_psi), math.sin(m.d_psi)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[0, 3] = m.d_x
    T[1, 3] = m.d_y
    return T


def se3_to_planar(T: np.ndarray) -> PlanarMotion:
    """Project onto (x, y, yaw), dropping z, pitch and roll."""
    return PlanarMotion(T[0, 3], T[1, 3], math.atan2(T[1, 0], T[0, 0]))


def check_pose(T: np.ndarray, tol=1e-6) -> None:
    T = np.asarray(T)
    if T.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {T.shape}")
    if not np.allclose(T[3], [0, 0, 0, 1], atol=tol):
        raise ValueError("pose bottom row must be (0, 0, 0, 1)")
    R = T[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1) > tol:
        raise ValueError("pose rotation block is not a proper rotation")


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def inverse(a: np.ndarray) -> np.ndarray:
    """Closed-form rigid inverse (R^T, -R^T t)."""
    a = np.asarray(a, dtype=np.float64)
    out = np.eye(4)
    R = a[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ a[:3, 3]
    return out


def reflect_y(T: np.ndarray) -> np.ndarray:
    """Conjugate by diag(1, -1, 1, 1): mirrors y and negates yaw."""
    return F_REFLECT @ np.asarray(T, dtype=np.float64) @ F_REFLECT


def relative_from_absolute(poses) -> list[np.ndarray]:
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    return [compose(inverse(a), b) for a, b in zip(poses[:-1], poses[1:])]


def reanchor(motion: np.ndarray) -> np.ndarray:
    """Frame-change map for a field whose ego moved by ``motion``.

    A field stored in frame a, after the ego moves by ``motion`` (= inv(T_a) T_b),
    is re-expressed in frame b by warping with this transform.
    """
    return inverse(motion)


def warp_coords(t: np.ndarray, g: GridGeometry) -> np.ndarray:
    """Fractional (d, h, w) source coordinates of every output voxel, shape (L, 3).

    Output voxel centre p samples the input at inv(t) p.
    """
    centers = g.centers().reshape(-1, 3)
    hom = np.concatenate([centers, np.ones((centers.shape[0], 1))], axis=1)
    src = hom @ inverse(t).T
    return metric_to_index(g, src[:, :3])


def warp_matrix(t: np.ndarray, g: GridGeometry):
    return tn.trilinear_matrix(warp_coords(t, g), g.dims)


def warp_trilinear(field, t: np.ndarray, g: GridGeometry):
    """Resample a (C, D, H, W) field under rigid transform ``t``.

    Out-of-grid samples read zero.  Accepts an ndarray (returns ndarray) or a
    Tensor (returns a Tensor differentiable with respect to the field).
    """
    is_tensor = isinstance(field, tn.Tensor)
    arr = field.data if is_tensor else np.asarray(field)
    if arr.ndim != 4 or arr.shape[1:] != g.dims:
        raise ValueError(f"field shape {arr.shape} does not match grid {g.dims}")
    out = tn.trilinear_sample(field, warp_matrix(t, g))
    out = tn.reshape(out, arr.shape)
    return out if is_tensor else out.data


def voxel_shift(field: np.ndarray, shift: tuple[int, int, int]) -> np.ndarray:
    """Integer shift along (d, h, w) with zero fill: out[i] = field[i - shift]."""
    out = np.zeros_like(field)
    src, dst = [slice(None)], [slice(None)]
    for s, n in zip(shift, field.shape[1:]):
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = field[tuple(src)]
    return out


__all__ = [
    "PlanarMotion", "se2_to_se3", "se3_to_planar", "compose", "inverse", "reflect_y",
    "wrap_angle", "relative_from_absolute", "reanchor", "warp_trilinear", "warp_coords",
    "check_pose", "identity", "voxel_shift", "index_to_metric",
]
