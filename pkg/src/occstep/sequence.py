"""Occupancy sequences with ego poses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import compose, relative_from_absolute, se3_to_planar
from .grid import SemanticOccGrid


@dataclass(eq=False)
class OccSequence:
    frames: list[SemanticOccGrid]
    poses: list[np.ndarray]  # absolute ego poses, 4x4
    relatives: list[np.ndarray] = None  # relatives[i] = inv(poses[i]) @ poses[i+1] unless composed
    frame_times: np.ndarray = None
    view_masks: list[np.ndarray] | None = None  # True = voxel hidden
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        if len(self.poses) != n:
            raise ValueError(f"{n} frames but {len(self.poses)} poses")
        if n == 0:
            raise ValueError("empty sequence")
        self.poses = [np.asarray(p, dtype=np.float64) for p in self.poses]
        if self.relatives is None:
            self.relatives = relative_from_absolute(self.poses) if n > 1 else []
        self.relatives = [np.asarray(r, dtype=np.float64) for r in self.relatives]
        if len(self.relatives) != n - 1:
            raise ValueError(f"{n} frames need {n - 1} relatives, got {len(self.relatives)}")
        if self.frame_times is None:
            self.frame_times = np.arange(n, dtype=np.float64) * 0.5
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if self.frame_times.shape != (n,):
            raise ValueError("frame_times length must equal frame count")
        if self.view_masks is not None and len(self.view_masks) != n:
            raise ValueError("view_masks length must equal frame count")

    def __len__(self):
        return len(self.frames)

    @property
    def num_classes(self) -> int:
        return self.frames[0].num_classes

    @property
    def geometry(self):
        return self.frames[0].geometry

    def labels(self) -> np.ndarray:
        return np.stack([f.labels for f in self.frames])

    def planar_relatives(self):
        return [se3_to_planar(r) for r in self.relatives]

    def check_consistency(self, tol=1e-6) -> float:
        """Max deviation between stored relatives and those implied by the poses."""
        if len(self) < 2:
            return 0.0
        implied = relative_from_absolute(self.poses)
        return max(float(np.abs(a - b).max()) for a, b in zip(implied, self.relatives))


def split(seq: OccSequence, history: int) -> tuple[OccSequence, OccSequence, np.ndarray]:
    """(history part, future part, relative pose across the boundary)."""
    if not 1 <= history < len(seq):
        raise ValueError(f"history {history} must be in [1, {len(seq) - 1}]")
    masks = seq.view_masks
    hist = OccSequence(seq.frames[:history], seq.poses[:history], seq.relatives[: history - 1],
                       seq.frame_times[:history], None if masks is None else masks[:history],
                       dict(seq.meta))
    fut = OccSequence(seq.frames[history:], seq.poses[history:], seq.relatives[history:],
                      seq.frame_times[history:], None if masks is None else masks[history:],
                      dict(seq.meta))
    return hist, fut, seq.relatives[history - 1]


def join(history: OccSequence, future: OccSequence, boundary: np.ndarray) -> OccSequence:
    masks = None
    if history.view_masks is not None or future.view_masks is not None:
        def fill(s):
            if s.view_masks is not None:
                return list(s.view_masks)
            return [np.zeros(f.shape, bool) for f in s.frames]
        masks = fill(history) + fill(future)
    return OccSequence(history.frames + future.frames, history.poses + future.poses,
                       history.relatives + [boundary] + future.relatives,
                       np.concatenate([history.frame_times, future.frame_times]), masks,
                       dict(history.meta))


def compose_chain(relatives) -> np.ndarray:
    out = np.eye(4)
    for r in relatives:
        out = compose(out, r)
    return out
