"""Finite-difference checks for every autodiff operator and the full model step."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .geometry import se2_to_se3, warp_matrix
from .grid import desk_geometry

TOLERANCE = 1e-3


def _away_from_kinks(rng, shape, lo=0.1, hi=1.5):
    """Values bounded away from zero (for abs) and from the wrap seam."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng):
    """name -> (function of Tensors, list of sample inputs)."""
    r = rng.standard_normal
    grid = desk_geometry((2, 4, 4), 0.5)
    M = warp_matrix(se2_to_se3((0.3, -0.2, 0.25)), grid)
    perm = rng.permutation(6)
    labels = rng.integers(0, 4, size=(3, 5))
    target = rng.integers(-1, 3, size=(2, 2, 3))
    target[0, 0, 0] = 1  # at least one valid voxel
    return {
        "add": (tn.add, [r((3, 4)), r((3, 4))]),
        "add_bias": (tn.add, [r((3, 4)), r(4)]),
        "mul": (tn.mul, [r((3, 4)), r((3, 4))]),
        "neg": (tn.neg, [r((3, 4))]),
        "sigmoid": (tn.sigmoid, [r((3, 4)) * 3]),
        "softplus": (tn.softplus, [r((3, 4)) * 3]),
        "exp": (tn.exp, [r((3, 4))]),
        "silu": (tn.silu, [r((3, 4)) * 2]),
        "abs": (tn.abs_, [_away_from_kinks(rng, (3, 4))]),
        "wrap_angle": (tn.wrap_angle, [_away_from_kinks(rng, (3, 4), 0.1, 2.5)]),
        "sum": (tn.sum, [r((3, 4))]),
        "mean": (tn.mean, [r((3, 4))]),
        "mean_axis": (lambda a: tn.mean(a, axis=1), [r((3, 4))]),
        "reshape": (lambda a: tn.reshape(a, (4, 3)), [r((3, 4))]),
        "transpose": (tn.transpose, [r((3, 4))]),
        "gather": (lambda a: tn.gather(a, perm, inverse=np.argsort(perm)), [r((6, 2))]),
        "gather_repeat": (lambda a: tn.gather(a, np.array([0, 2, 2, 1])), [r((3, 2))]),
        "concat_channel": (tn.concat_channel, [r((2, 3)), r((1, 3))]),
        "embedding": (lambda t: tn.embedding(t, labels), [r((4, 3))]),
        "linear": (tn.linear, [r((5, 3)), r((3, 4)), r(4)]),
        "conv3": (tn.conv3, [r((2, 3, 4, 4)), r((3, 2, 3, 3, 3)) * 0.3, r(3)]),
        "conv3_planar": (lambda x, k, b: tn.conv3(x, k, b, planar_only=True),
                         [r((2, 2, 4, 4)), r((3, 2, 3, 3, 3)) * 0.3, r(3)]),
        "conv3_1x1": (tn.conv3, [r((3, 2, 2, 2)), r((2, 3, 1, 1, 1)), r(2)]),
        "upsample_planar": (tn.upsample_planar, [r((2, 2, 2, 3))]),
        "softmax_channel": (tn.softmax_channel, [r((4, 2, 3))]),
        "cross_entropy": (lambda z: tn.cross_entropy(z, target), [r((3, 2, 2, 3))]),
        "smooth_l1": (tn.smooth_l1, [r((2, 5)) * 2, r((2, 5)) * 2]),
        "trilinear_sample": (lambda f: tn.trilinear_sample(f, M), [r((2,) + grid.dims)]),
        "scan": (tn.scan, [rng.uniform(0.1, 0.95, (7, 3)), r((7, 3))]),
        "scan_long": (tn.scan, [rng.uniform(0.5, 0.99, (40, 2)), r((40, 2))]),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def check_ops(seed: int = 0, names=None) -> dict[str, float]:
    """Relative finite-difference error for each registered operator."""
    cases = _op_cases(np.random.default_rng(seed))
    names = list(cases) if names is None else list(names)
    out = {}
    for name in names:
        fn, inputs = cases[name]
        out[name] = tn.grad_check(fn, inputs, seed=seed)
    return out


def toy_model_config():
    """4x8x8 grid, K = 3: small enough to difference every path of a model step."""
    from .model import ModelConfig

    return ModelConfig(K=3, C_e=4, pe_bands=1, C_h=8, heads=2, srd_widths=(4, 6, 8), tile=4,
                       grid=desk_geometry((4, 8, 8), 0.4), ego_hidden=4)


def check_model(seed: int = 0, max_checks: int = 6, floor: float = 1e-6) -> float:
    """Gradient of the training loss over two chained steps w.r.t. every parameter.

    The second step re-anchors the state under a non-trivial planar motion, so
    the warp, the fusion recurrence and both heads all carry gradient.  Deep
    parameters see gradients near 1e-8, where central differences carry about
    1e-10 of round-off; ``floor`` keeps those entries to an absolute bound.
    """
    from .model import OccWorldModel
    from .rollout import loss

    cfg = toy_model_config()
    rng = np.random.default_rng(seed)
    model = OccWorldModel(cfg, seed=seed, dtype=np.float64)
    names = list(model.params)
    # break the zero-initialised residual projections so every branch is active
    init = {k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()}
    frames = [rng.integers(0, cfg.K, size=cfg.grid.dims) for _ in range(3)]
    frames[2][0, 0, :2] = -1
    motion = se2_to_se3((0.25, -0.15, 0.2))
    ego_gt = np.array([0.3, -0.1, 0.15])

    def run(*params):
        model.params = dict(zip(names, params))
        state = model.initial_state()
        out = model.step(frames[0], state, np.eye(4))
        out = model.step(frames[1], out.state, motion)
        return loss(out.logits, frames[2], out.ego, ego_gt)

    return tn.grad_check(run, [init[k] for k in names], seed=seed, floor=floor,
                         max_checks=max_checks)


@dataclass
class GradReport:
    seed: int
    errors: dict[str, float]
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def ok(self, tol: float = TOLERANCE) -> bool:
        return all(e < tol for e in self.errors.values())

    def lines(self, tol: float = TOLERANCE) -> list[str]:
        return [f"{name},{err:.3e},{'ok' if err < tol else 'FAIL'}"
                for name, err in self.errors.items()]


def gradcheck_report(seed: int = 0, include_model: bool = True) -> GradReport:
    t0 = time.perf_counter()
    errors = check_ops(seed)
    if include_model:
        errors["model_step_end_to_end"] = check_model(seed)
    return GradReport(seed, errors, time.perf_counter() - t0)
