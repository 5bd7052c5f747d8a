"""Warmup, reactive and proactive rollouts, the training objective and loop.

Step accounting.  One model step ingests frame j (re-anchoring the state by
the motion j-1 -> j), and predicts frame j+1 together with the ego motion
j -> j+1.  Warmup runs one step per history frame, so its last output is
already the forecast of the first future frame.  Rollout step tau feeds the
previous forecast back in and yields the next one; a horizon of T therefore
costs exactly h + T steps, and the output of the final step looks one frame
past the horizon.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .geometry import PlanarMotion, se2_to_se3, se3_to_planar
from .grid import IGNORE, SemanticOccGrid
from .metrics import horizon_scores, plan_l1_yaw, plan_l2
from .model import OccWorldModel, PersistentState, StepOutput, detach_state
from .sequence import OccSequence, split

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RolloutConfig:
    history: int = 4
    horizon: int = 6
    literal: bool = False  # feed the last real observation at every step

    def __post_init__(self):
        if self.history < 1 or self.horizon < 1:
            raise ValueError("history and horizon must be >= 1")


@dataclass
class RolloutResult:
    predicted_frames: list[np.ndarray]  # (K, D, H, W) class probabilities
    predicted_egos: list[PlanarMotion]
    mode: str

    def __post_init__(self):
        if len(self.predicted_frames) != len(self.predicted_egos):
            raise ValueError("frame and ego predictions differ in length")
        if self.mode not in ("reactive", "proactive", "copy"):
            raise ValueError(f"unknown rollout mode {self.mode!r}")

    def __len__(self):
        return len(self.predicted_frames)

    def labels(self) -> list[np.ndarray]:
        """Argmax class per voxel; ties go to the lower class index."""
        return [np.argmax(p, axis=0).astype(np.int16) for p in self.predicted_frames]


def _motion_matrix(m) -> np.ndarray:
    if isinstance(m, PlanarMotion):
        return se2_to_se3(m)
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (3,):
        return se2_to_se3(tuple(m))
    if m.shape != (4, 4):
        raise ValueError(f"motion must be a PlanarMotion, (3,) or 4x4, got shape {m.shape}")
    return m


def _run(model, labels, state, motion) -> tuple[np.ndarray, PlanarMotion, PersistentState]:
    with tn.no_grad():
        out = model.step(labels, state, motion)
    return out.probs(), out.ego_motion(), out.state


def _warmup(history: OccSequence, model):
    if history is None or len(history) == 0:
        raise ValueError("warmup needs at least one history frame")
    state = model.initial_state()
    probs = ego = None
    for j, frame in enumerate(history.frames):
        motion = np.eye(4) if j == 0 else history.relatives[j - 1]
        probs, ego, state = _run(model, frame.labels, state, motion)
    return state, probs, ego


def warmup(history: OccSequence, model, cfg: RolloutConfig | None = None) -> PersistentState:
    """Fold every history frame into the state once, in order."""
    return _warmup(history, model)[0]


def _rollout(history, horizon, model, cfg, motions, mode):
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cfg = cfg or RolloutConfig(history=len(history), horizon=horizon)
    state, probs, ego = _warmup(history, model)
    last_obs = history.frames[-1].labels
    frames, egos = [probs], [ego]
    for tau in range(1, horizon + 1):
        o_in = last_obs if cfg.literal else np.argmax(probs, axis=0).astype(np.int16)
        motion = se2_to_se3(ego) if motions is None else _motion_matrix(motions[tau - 1])
        probs, ego, state = _run(model, o_in, state, motion)
        if tau < horizon:
            frames.append(probs)
            egos.append(ego)
    return RolloutResult(frames, egos, mode)


def reactive_rollout(history: OccSequence, horizon_T: int, model,
                     cfg: RolloutConfig | None = None) -> RolloutResult:
    """Autoregressive forecast that warps with the model's own ego estimates."""
    return _rollout(history, horizon_T, model, cfg, None, "reactive")


def proactive_rollout(history: OccSequence, future_poses, model,
                      cfg: RolloutConfig | None = None) -> RolloutResult:
    """Forecast along supplied future ego motions.

    ``future_poses[k]`` is the relative motion from future frame k-1 to k
    (frame -1 being the last history frame), as a 4x4 pose or PlanarMotion.
    Rollout step tau warps with ``future_poses[tau - 1]``.
    """
    future_poses = list(future_poses)
    if cfg is not None and len(future_poses) != cfg.horizon:
        raise ValueError(f"expected {cfg.horizon} future poses, got {len(future_poses)}")
    if not future_poses:
        raise ValueError("proactive rollout needs at least one future pose")
    return _rollout(history, len(future_poses), model, cfg, future_poses, "proactive")


def baseline_copy_forward(history: OccSequence, horizon: int) -> RolloutResult:
    """Repeat the last history frame (one-hot) with zero ego motion."""
    if len(history) == 0:
        raise ValueError("copy-forward needs at least one history frame")
    last = history.frames[-1]
    lab = np.where(last.labels == IGNORE, 0, last.labels)
    onehot = (np.arange(last.num_classes)[:, None, None, None] == lab[None]).astype(np.float32)
    return RolloutResult([onehot.copy() for _ in range(horizon)],
                         [PlanarMotion.zero() for _ in range(horizon)], "copy")


# ------------------------------------------------------------------ objective


_SEL_XY = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
_SEL_PSI = np.array([[0.0], [0.0], [1.0]])


def loss(logits, target, ego_hat, ego_gt, weights=(1.0, 0.1, 0.1)) -> tn.Tensor:
    """lam_sem * CE + lam_pos * SmoothL1(xy) + lam_rot * |wrap(psi_hat - psi)|.

    ``ego_hat`` is the (1, 3) ego tensor (or a PlanarMotion); ``ego_gt`` a
    PlanarMotion or (3,) array.  Voxels labelled -1 are ignored.
    """
    lam_sem, lam_pos, lam_rot = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    tgt = target.labels if isinstance(target, SemanticOccGrid) else np.asarray(target)
    if not np.any(tgt != IGNORE):
        warnings.warn("every target voxel is ignored; semantic term is 0", RuntimeWarning)
    ce = tn.cross_entropy(logits, tgt, ignore_index=IGNORE)
    if isinstance(ego_hat, PlanarMotion):
        ego_hat = ego_hat.as_array()
    ego_hat = tn.as_tensor(ego_hat)
    ego_hat = tn.reshape(ego_hat, (1, 3))
    dt = ego_hat.dtype
    gt = (ego_gt.as_array() if isinstance(ego_gt, PlanarMotion) else np.asarray(ego_gt)).reshape(1, 3)
    gt = gt.astype(dt)
    pos = tn.smooth_l1(tn.linear(ego_hat, _SEL_XY.astype(dt)), gt[:, :2])
    dpsi = tn.add(tn.linear(ego_hat, _SEL_PSI.astype(dt)), -gt[:, 2:])
    rot = tn.mean(tn.abs_(tn.wrap_angle(dpsi)))
    return tn.add(tn.add(tn.mul(ce, float(lam_sem)), tn.mul(pos, float(lam_pos))),
                  tn.mul(rot, float(lam_rot)))


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200  # optimizer updates
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    window: int = 1  # frame pairs per update (truncated backprop length)
    weights: tuple[float, float, float] = (1.0, 0.1, 0.1)
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.window < 1 or self.lr < 0:
            raise ValueError("steps >= 0, window >= 1 and lr >= 0 required")


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    ce_before: float = math.nan
    ce_after: float = math.nan
    steps: int = 0
    final_state: PersistentState | None = None  # carried state, needed to resume mid-sequence

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(self.epoch_losses):
            w.writerow([i, repr(v)])
        return buf.getvalue()


def _windows(dataset, window: int, rng: np.random.Generator):
    """One epoch: sequences in shuffled order, each cut into consecutive windows.

    Yields (sequence index, first pair index, pair count, resets state).
    """
    for s in rng.permutation(len(dataset)):
        n_pairs = len(dataset[s]) - 1
        for start in range(0, n_pairs, window):
            yield int(s), start, min(window, n_pairs - start), start == 0


def _pair_motion(seq: OccSequence, j: int) -> np.ndarray:
    return np.eye(4) if j == 0 else seq.relatives[j - 1]


def teacher_forced_ce(dataset, model) -> float:
    """Mean next-frame CE over every frame pair with ground-truth inputs."""
    total, n = [], 0
    with tn.no_grad():
        for seq in dataset:
            state = model.initial_state()
            for j in range(len(seq) - 1):
                out = model.step(seq.frames[j].labels, state, _pair_motion(seq, j))
                total.append(float(tn.cross_entropy(out.logits, seq.frames[j + 1].labels).data))
                state = out.state
                n += 1
    if not n:
        raise ValueError("dataset has no frame pairs")
    return math.fsum(total) / n


def train(dataset, model: OccWorldModel, cfg: TrainConfig = TrainConfig(), optimizer=None,
          start_step: int = 0, resume_state: PersistentState | None = None,
          evaluate: bool = True, progress=None) -> TrainReport:
    """Teacher-forced next-frame training with AdamW.

    Each update consumes ``cfg.window`` consecutive frame pairs of one sequence;
    the state flows between windows of the same sequence but is detached at
    window boundaries.  The window order is a pure function of (seed, epoch),
    so a resumed run (``start_step`` > 0, with the carried ``resume_state``)
    continues exactly where an uninterrupted run would be.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    if all(len(s) < 2 for s in dataset):
        raise ValueError("training needs sequences with at least two frames")
    opt = optimizer or tn.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                                weight_decay=cfg.weight_decay)
    report = TrainReport()
    if evaluate:
        report.ce_before = teacher_forced_ce(dataset, model)
    step, epoch = 0, 0
    state = None
    while step < start_step + cfg.steps:
        rng = np.random.default_rng([cfg.seed, epoch])
        epoch_losses = []
        for s, start, count, reset in _windows(dataset, cfg.window, rng):
            if step >= start_step + cfg.steps:
                break
            seq = dataset[s]
            if reset:
                state = model.initial_state()
            if step < start_step:  # replay the schedule up to the resume point
                step += 1
                continue
            if step == start_step and step > 0 and not reset and resume_state is not None:
                state = resume_state
            terms = []
            for j in range(start, start + count):
                out = model.step(seq.frames[j].labels, state, _pair_motion(seq, j))
                terms.append(loss(out.logits, seq.frames[j + 1], out.ego,
                                  se3_to_planar(seq.relatives[j]), cfg.weights))
                state = out.state
            total = terms[0]
            for t in terms[1:]:
                total = tn.add(total, t)
            total = tn.mul(total, 1.0 / count)
            value = float(total.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged at step {step}: loss {value}")
            opt.zero_grad()
            tn.backward(total)
            opt.step()
            state = detach_state(state)
            report.step_losses.append(value)
            epoch_losses.append(value)
            step += 1
            if progress is not None:
                progress(step, value)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.5f", step, value)
        if epoch_losses:
            report.epoch_losses.append(math.fsum(epoch_losses) / len(epoch_losses))
        epoch += 1
    report.steps = step
    report.final_state = state
    if evaluate:
        report.ce_after = teacher_forced_ce(dataset, model)
    return report


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalScores:
    miou: float
    iou: float
    l2: float
    l1: float
    miou_per_second: list[float] = field(default_factory=list)


def future_motions(seq: OccSequence, history: int, horizon: int) -> list[np.ndarray]:
    """Ground-truth relatives aligned with proactive rollout steps."""
    if history + horizon > len(seq):
        raise ValueError(f"sequence of {len(seq)} frames is shorter than {history}+{horizon}")
    return seq.relatives[history - 1: history - 1 + horizon]


def score_rollout(hist, fut, motions, model, cfg: RolloutConfig, mode: str = "reactive"):
    """Per-second mIoU/IoU lists plus L2/L1 for one (history, future) pair."""
    if mode == "copy":
        res = baseline_copy_forward(hist, cfg.horizon)
    elif mode == "reactive":
        res = reactive_rollout(hist, cfg.horizon, model, cfg)
    elif mode == "proactive":
        res = proactive_rollout(hist, motions, model, cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gts = [f.labels for f in fut.frames[: cfg.horizon]]
    m, i = horizon_scores(res.labels(), gts, fut.num_classes)
    gt_mot = [se3_to_planar(t) for t in motions]
    return m, i, plan_l2(res.predicted_egos, gt_mot), plan_l1_yaw(res.predicted_egos, gt_mot)


def evaluate(history_seqs, future_seqs, model, cfg: RolloutConfig, mode: str = "reactive",
             motions=None, executor=None) -> EvalScores:
    """Horizon-averaged scores over many (history, future) pairs.

    ``future_seqs[i]`` holds the ground-truth frames to forecast, ``motions[i]``
    the ground-truth ego motions (used by proactive mode and the planning
    metrics).  Pairs are independent, so an executor may score them in parallel.
    """
    if mode not in ("reactive", "proactive", "copy"):
        raise ValueError(f"unknown mode {mode!r}")
    if not history_seqs:
        raise ValueError("nothing to evaluate")
    jobs = list(zip(history_seqs, future_seqs, motions))
    run = (lambda j: score_rollout(*j, model, cfg, mode))
    scores = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    m_sec = np.nanmean(np.array([s[0] for s in scores]), axis=0)
    i_sec = np.nanmean(np.array([s[1] for s in scores]), axis=0)
    return EvalScores(float(np.mean(m_sec)), float(np.mean(i_sec)),
                      float(np.mean([s[2] for s in scores])), float(np.mean([s[3] for s in scores])),
                      [float(v) for v in m_sec])


def split_all(seqs, cfg: RolloutConfig):
    """(histories, futures, ground-truth future motions) for evaluation."""
    hs, fs, ms = [], [], []
    for s in seqs:
        h, f, _ = split(s, cfg.history)
        hs.append(h)
        fs.append(f)
        ms.append(future_motions(s, cfg.history, cfg.horizon))
    return hs, fs, ms


__all__ = ["OccSequence", "RolloutConfig", "RolloutResult", "warmup", "reactive_rollout",
           "proactive_rollout", "baseline_copy_forward", "loss", "TrainConfig", "TrainReport",
           "train", "teacher_forced_ce", "evaluate", "score_rollout", "EvalScores", "future_motions", "split_all",
           "StepOutput"]
