"""Corrupted-history generators and synthetic moving-box scenes.

Every generator is a pure function of its inputs; randomness comes only from
``CorruptionSpec.seed`` / the scene seed.  Generators see the history slice
only, so futures are untouched by construction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import reflect_y, se2_to_se3
from .grid import IGNORE, GridGeometry, SemanticOccGrid, desk_geometry
from .sequence import OccSequence, compose_chain

REGIMES = ("reverse", "discontinuous", "fragmentary", "reductive")


@dataclass(frozen=True)
class CorruptionSpec:
    regime: str
    p_f: float = 0.25
    p_v: float = 0.25
    views: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not (0 <= self.p_f <= 1 and 0 <= self.p_v <= 1):
            raise ValueError("p_f and p_v must lie in [0, 1]")
        if self.views < 1:
            raise ValueError("views must be >= 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, REGIMES.index(self.regime)])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _with_meta(seq: OccSequence, spec: CorruptionSpec | None, **kw) -> dict:
    meta = dict(seq.meta)
    if spec is not None:
        meta["corruption"] = asdict(spec)
    meta.update(kw)
    return meta


def gen_reverse(seq: OccSequence, spec: CorruptionSpec | None = None) -> OccSequence:
    """Mirror along y: flip the H axis of every frame and conjugate every pose."""
    frames = [f.with_labels(f.labels[:, ::-1, :]) for f in seq.frames]
    masks = None if seq.view_masks is None else [m[:, ::-1, :].copy() for m in seq.view_masks]
    return OccSequence(frames, [reflect_y(p) for p in seq.poses], [reflect_y(r) for r in seq.relatives],
                       seq.frame_times.copy(), masks, _with_meta(seq, spec))


def gen_discontinuous(seq: OccSequence, spec: CorruptionSpec) -> OccSequence:
    """Drop round(p_f * t0) frames (never the last) and compose relatives across gaps."""
    t0 = len(seq)
    if t0 < 2 and spec.p_f > 0:
        raise ValueError("discontinuous corruption needs at least two history frames")
    n_drop = round_half_up(spec.p_f * t0)
    if n_drop >= t0 or n_drop > t0 - 1:
        raise ValueError(f"dropping {n_drop} of {t0} frames would leave no anchor frame")
    dropped = set(spec.rng().choice(t0 - 1, size=n_drop, replace=False).tolist()) if n_drop else set()
    keep = [i for i in range(t0) if i not in dropped]
    rel = [compose_chain(seq.relatives[a:b]) for a, b in zip(keep[:-1], keep[1:])]
    masks = None if seq.view_masks is None else [seq.view_masks[i] for i in keep]
    return OccSequence([seq.frames[i] for i in keep], [seq.poses[i] for i in keep], rel,
                       seq.frame_times[keep], masks, _with_meta(seq, spec, kept=keep))


def sector_index(g: GridGeometry, views: int) -> np.ndarray:
    """Azimuthal sector (0..views-1) of every voxel centre around the ego origin."""
    c = g.centers()
    ang = np.mod(np.arctan2(c[..., 1], c[..., 0]), 2 * np.pi)
    return np.minimum((ang / (2 * np.pi / views)).astype(np.int64), views - 1)


def gen_fragmentary(seq: OccSequence, spec: CorruptionSpec) -> OccSequence:
    """Hide round(p_v * V) azimuthal sectors in round(p_f * t0) frames (labels -> -1)."""
    t0 = len(seq)
    rng = spec.rng()
    n_frames = round_half_up(spec.p_f * t0)
    n_views = round_half_up(spec.p_v * spec.views)
    chosen = sorted(rng.choice(t0, size=n_frames, replace=False).tolist()) if n_frames else []
    sectors = sector_index(seq.geometry, spec.views)
    frames = list(seq.frames)
    masks = [np.zeros(f.shape, bool) if seq.view_masks is None else seq.view_masks[i].copy()
             for i, f in enumerate(seq.frames)]
    hidden = {}
    for t in chosen:
        views = rng.choice(spec.views, size=n_views, replace=False)
        hidden[t] = sorted(views.tolist())
        m = np.isin(sectors, views)
        masks[t] |= m
        lab = frames[t].labels.copy()
        lab[m] = IGNORE
        frames[t] = frames[t].with_labels(lab)
    return OccSequence(frames, list(seq.poses), list(seq.relatives), seq.frame_times.copy(),
                       masks, _with_meta(seq, spec, hidden_views=hidden))


def gen_reductive(seq: OccSequence, spec: CorruptionSpec) -> OccSequence:
    """Relabel round(p_v * n_occupied) voxels in round(p_f * t0) frames to another non-empty class."""
    K = seq.num_classes
    if K < 3:
        raise ValueError("reductive corruption needs K >= 3")
    t0 = len(seq)
    rng = spec.rng()
    n_frames = round_half_up(spec.p_f * t0)
    chosen = sorted(rng.choice(t0, size=n_frames, replace=False).tolist()) if n_frames else []
    frames = list(seq.frames)
    for t in chosen:
        lab = frames[t].labels.copy()
        flat = lab.reshape(-1)
        occ = np.flatnonzero(flat > 0)
        n = round_half_up(spec.p_v * occ.size)
        if n == 0:
            continue
        pick = rng.choice(occ, size=n, replace=False)
        old = flat[pick]
        new = rng.integers(1, K - 1, size=n)  # uniform over {1..K-1} minus old
        new = np.where(new >= old, new + 1, new)
        flat[pick] = new
        frames[t] = frames[t].with_labels(lab)
    return OccSequence(frames, list(seq.poses), list(seq.relatives), seq.frame_times.copy(),
                       None if seq.view_masks is None else list(seq.view_masks),
                       _with_meta(seq, spec, corrupted_frames=chosen))


def corrupt(seq: OccSequence, spec: CorruptionSpec) -> OccSequence:
    return {
        "reverse": gen_reverse,
        "discontinuous": gen_discontinuous,
        "fragmentary": gen_fragmentary,
        "reductive": gen_reductive,
    }[spec.regime](seq, spec)


# ------------------------------------------------------------------ synthetic scenes


@dataclass(frozen=True)
class Box:
    center: tuple[float, float]  # world x, y at t = 0
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    label: int


@dataclass(frozen=True)
class SceneConfig:
    dims: tuple[int, int, int] = (16, 32, 32)
    voxel: float = 0.4
    K: int = 8
    n_frames: int = 10
    dt: float = 0.5
    boxes: tuple[int, int] = (1, 3)
    box_size: tuple[float, float] = (1.2, 3.2)  # planar extent, m
    box_height: tuple[float, float] = (1.0, 2.4)
    spawn_radius: float = 4.0
    object_speed: tuple[float, float] = (0.0, 0.8)
    ego_speed: tuple[float, float] = (0.4, 1.2)
    yaw_rate: tuple[float, float] = (0.1, 0.3)
    trajectories: tuple[str, ...] = ("straight", "arc", "turn")

    def geometry(self) -> GridGeometry:
        return desk_geometry(self.dims, self.voxel)


def ego_trajectory(kind: str, speed: float, yaw_rate: float, n: int, dt: float) -> list[np.ndarray]:
    """Absolute ego poses starting at the world origin."""
    if kind not in ("straight", "arc", "turn"):
        raise ValueError(f"unknown trajectory {kind!r}")
    poses, x, y, psi = [], 0.0, 0.0, 0.0
    for i in range(n):
        poses.append(se2_to_se3((x, y, psi)))
        w = 0.0 if kind == "straight" else yaw_rate
        if kind == "turn" and i < n // 2:
            w = 0.0
        x += speed * dt * math.cos(psi)
        y += speed * dt * math.sin(psi)
        psi += w * dt
    return poses


def render_frame(g: GridGeometry, K: int, ego_pose: np.ndarray, boxes, t: float) -> np.ndarray:
    """Labels in the ego frame: class 1 below the ground plane, boxes above it."""
    c = g.centers().reshape(-1, 3)
    world = c @ ego_pose[:3, :3].T + ego_pose[:3, 3]
    dz = g.voxel_size[2]
    ground_top = g.ranges[4] + dz
    labels = np.zeros(len(c), dtype=np.int16)
    labels[world[:, 2] < ground_top] = 1
    for b in boxes:
        cx = b.center[0] + b.velocity[0] * t
        cy = b.center[1] + b.velocity[1] * t
        cs, sn = math.cos(b.yaw), math.sin(b.yaw)
        lx = cs * (world[:, 0] - cx) + sn * (world[:, 1] - cy)
        ly = -sn * (world[:, 0] - cx) + cs * (world[:, 1] - cy)
        inside = ((np.abs(lx) < b.size[0] / 2) & (np.abs(ly) < b.size[1] / 2)
                  & (world[:, 2] >= ground_top) & (world[:, 2] < ground_top + b.size[2]))
        labels[inside] = b.label
    return labels.reshape(g.dims)


def render_scene(g: GridGeometry, K: int, poses, boxes, times, meta=None) -> OccSequence:
    frames = [SemanticOccGrid(render_frame(g, K, p, boxes, t), K, g) for p, t in zip(poses, times)]
    return OccSequence(frames, list(poses), None, np.asarray(times, float), None, dict(meta or {}))


def gen_synthetic_scene(cfg: SceneConfig, seed: int) -> OccSequence:
    """Ground plane, 1-3 moving boxes and a scripted ego path, rendered per frame."""
    g = cfg.geometry()
    if min(cfg.dims[1:]) < 8:
        raise ValueError("synthetic scenes need at least 8 voxels per planar axis")
    half = min(g.ranges[1] - g.ranges[0], g.ranges[3] - g.ranges[2]) / 2
    if cfg.box_size[1] >= 2 * half or cfg.box_height[1] >= g.ranges[5] - g.ranges[4]:
        raise ValueError("box size exceeds the grid")
    if cfg.K < 3:
        raise ValueError("scenes need K >= 3 (ground plus at least one object class)")
    rng = np.random.default_rng(seed)
    kind = cfg.trajectories[rng.integers(len(cfg.trajectories))]
    speed = rng.uniform(*cfg.ego_speed)
    yaw_rate = rng.uniform(*cfg.yaw_rate) * rng.choice([-1.0, 1.0])
    boxes = []
    for i in range(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1)):
        r = rng.uniform(1.5, cfg.spawn_radius)
        a = rng.uniform(0, 2 * np.pi)
        v = rng.uniform(*cfg.object_speed)
        va = rng.uniform(0, 2 * np.pi)
        boxes.append(Box(
            center=(r * math.cos(a), r * math.sin(a)),
            size=(rng.uniform(*cfg.box_size), rng.uniform(*cfg.box_size), rng.uniform(*cfg.box_height)),
            yaw=rng.uniform(-np.pi, np.pi),
            velocity=(v * math.cos(va), v * math.sin(va)),
            label=2 + i % (cfg.K - 2),
        ))
    times = np.arange(cfg.n_frames) * cfg.dt
    poses = ego_trajectory(kind, speed, yaw_rate, cfg.n_frames, cfg.dt)
    meta = {"scene": asdict(cfg), "seed": int(seed), "trajectory": kind,
            "ego_speed": float(speed), "yaw_rate": float(yaw_rate), "n_boxes": len(boxes)}
    return render_scene(g, cfg.K, poses, boxes, times, meta)


__all__ = ["CorruptionSpec", "REGIMES", "gen_reverse", "gen_discontinuous", "gen_fragmentary",
           "gen_reductive", "corrupt", "SceneConfig", "Box", "gen_synthetic_scene", "render_scene",
           "render_frame", "ego_trajectory", "sector_index", "round_half_up"]
