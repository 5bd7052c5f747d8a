"""The occupancy world model: embedding, SSM filling blocks, state fusion, decoder.

Feature layout conventions used inside one step:

* voxel grids are channel-first ``(C, D, H, W)``;
* sequences are ``(L, C)``; rows are voxels in raster order unless the
  sequence has been passed through the model's Morton permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .geometry import PlanarMotion, reanchor, warp_matrix
from .grid import GridGeometry, SemanticOccGrid, build_tiled_morton, desk_geometry


@dataclass(frozen=True)
class ModelConfig:
    K: int = 8
    C_e: int = 8
    pe_bands: int = 4
    C_h: int = 32
    heads: int = 4
    srd_widths: tuple[int, int, int] = (16, 32, 64)
    tile: int = 8
    grid: GridGeometry = field(default_factory=desk_geometry)
    ego_hidden: int = 32

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.C_h < 1 or self.C_e < 1 or self.pe_bands < 1:
            raise ValueError("channel counts must be positive")
        w = tuple(int(v) for v in self.srd_widths)
        if len(w) != 3 or not (w[0] < w[1] < w[2]):
            raise ValueError(f"srd_widths must be strictly increasing, got {self.srd_widths}")
        object.__setattr__(self, "srd_widths", w)
        if self.C % self.heads or self.C_h % self.heads:
            raise ValueError("heads must divide both the input width and C_h")
        _, H, W = self.grid.dims
        if H % 4 or W % 4:
            raise ValueError(f"H and W must be divisible by 4, got {self.grid.dims}")

    @property
    def C_p(self) -> int:
        return 6 * self.pe_bands

    @property
    def C(self) -> int:
        return self.C_e + self.C_p


def full_scale_config() -> ModelConfig:
    from .grid import full_scale_geometry
    return ModelConfig(K=17, C_e=16, pe_bands=8, C_h=64, heads=8,
                       srd_widths=(128, 256, 512), grid=full_scale_geometry())


def fourier_encoding(dims, bands: int) -> np.ndarray:
    """(D*H*W, 6*bands) sin/cos features; phase is zero at index 0 on every axis.

    Channel order: for axis in (d, h, w), for band k: sin, cos of pi * 2^k * i / n.
    """
    D, H, W = dims
    idx = np.stack(np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij"), -1)
    idx = idx.reshape(-1, 3).astype(np.float64)
    cols = []
    for axis, n in enumerate(dims):
        for k in range(bands):
            phase = np.pi * (2.0 ** k) * idx[:, axis] / n
            cols += [np.sin(phase), np.cos(phase)]
    return np.stack(cols, axis=1)


class PersistentState(NamedTuple):
    S: tn.Tensor  # (C_h, D, H, W)
    frame_index: int


class StepOutput(NamedTuple):
    logits: tn.Tensor  # (K, D, H, W)
    ego: tn.Tensor  # (1, 3): d_x, d_y, d_psi
    state: PersistentState

    def probs(self) -> np.ndarray:
        return tn.softmax_channel(self.logits).data

    def ego_motion(self) -> PlanarMotion:
        return PlanarMotion(*self.ego.data.reshape(3).astype(np.float64))


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    C, Ch, K = cfg.C, cfg.C_h, cfg.K
    w1, w2, w3 = cfg.srd_widths
    # unit-variance class rows, on the same scale as the sin/cos positional channels
    p: dict[str, np.ndarray] = {"embed": rng.standard_normal((K, cfg.C_e))}

    for name, width in (("pre", C), ("post", Ch)):
        s = 1 / math.sqrt(width)
        p[f"{name}.W_u"] = _uniform(rng, (width, width), s)
        p[f"{name}.W_z"] = _uniform(rng, (width, width), s)
        p[f"{name}.W_dt"] = _uniform(rng, (width, cfg.heads), s)
        p[f"{name}.b_dt"] = np.zeros(cfg.heads)
        p[f"{name}.a"] = np.zeros(width)
        p[f"{name}.W_o"] = np.zeros((width, width))

    s = 1 / math.sqrt(C)
    for proj in ("in", "g", "skip"):
        p[f"istpf.W_{proj}"] = _uniform(rng, (C, Ch), s)
        p[f"istpf.b_{proj}"] = np.zeros(Ch)
    p["istpf.W_out"] = _uniform(rng, (Ch, Ch), 1 / math.sqrt(Ch))
    p["istpf.b_out"] = np.zeros(Ch)
    # softplus(A) * softplus(0) = 0.5 -> alpha = exp(-0.5)
    p["istpf.A"] = np.full(Ch, math.log(math.expm1(0.5 / math.log(2))))
    p["istpf.dt"] = np.zeros(Ch)
    p["istpf.B"] = np.ones(Ch)
    p["istpf.C"] = np.ones(Ch)

    def conv(name, cout, cin, k=3):
        p[f"srd.{name}.k"] = _uniform(rng, (cout, cin, k, k, k), 1 / math.sqrt(cin * k ** 3))
        p[f"srd.{name}.b"] = np.zeros(cout)

    conv("enc1", w1, Ch)
    conv("enc2", w2, w1)
    conv("enc3", w3, w2)
    conv("agg", w3, w3)
    conv("dec2", w2, w3 + w2)
    conv("dec1", w1, w2 + w1)
    conv("sem", K, w1, k=1)
    p["ego.W1"] = _uniform(rng, (w1, cfg.ego_hidden), 1 / math.sqrt(w1))
    p["ego.b1"] = np.zeros(cfg.ego_hidden)
    p["ego.W2"] = _uniform(rng, (cfg.ego_hidden, 3), 0.1 / math.sqrt(cfg.ego_hidden))
    p["ego.b2"] = np.zeros(3)
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


class OccWorldModel:
    """Parameters plus the forward pass of one incremental step.

    ``n_steps`` counts calls to :meth:`step`; rollouts use it to prove the
    one-step-per-frame contract.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float32, perm=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        raw = params if params is not None else init_params(cfg, seed, dtype)
        expected = init_params(cfg, 0, dtype) if params is not None else raw
        for k, v in expected.items():
            if k not in raw or np.shape(raw[k]) != v.shape:
                raise ValueError(f"parameter {k} missing or mis-shaped")
        extra = set(raw) - set(expected)
        if extra:
            raise ValueError(f"unexpected parameters {sorted(extra)}")
        self.params = {k: tn.Tensor(np.array(raw[k], dtype=self.dtype), requires_grad=True)
                       for k in expected}
        self.perm = perm or build_tiled_morton(cfg.grid.dims, cfg.tile)
        self.pe = fourier_encoding(cfg.grid.dims, cfg.pe_bands).astype(self.dtype)
        self.n_steps = 0
        self._head_expand = {}

    # -- bookkeeping

    def parameters(self) -> list[tn.Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def astype(self, dtype) -> "OccWorldModel":
        return OccWorldModel(self.cfg, self.state_dict(), dtype=dtype, perm=self.perm)

    def with_permutation(self, perm) -> "OccWorldModel":
        m = OccWorldModel(self.cfg, self.state_dict(), dtype=self.dtype, perm=perm)
        return m

    def initial_state(self) -> PersistentState:
        D, H, W = self.cfg.grid.dims
        return PersistentState(tn.Tensor(np.zeros((self.cfg.C_h, D, H, W), self.dtype)), 0)

    def _expand(self, width: int) -> tn.Tensor:
        if width not in self._head_expand:
            per = width // self.cfg.heads
            E = np.kron(np.eye(self.cfg.heads), np.ones((1, per)))
            self._head_expand[width] = tn.Tensor(E.astype(self.dtype))
        return self._head_expand[width]

    # -- components

    def embed_raster(self, labels: np.ndarray) -> tn.Tensor:
        """(L, C) features in raster order: class embedding then positional code."""
        labels = np.asarray(labels)
        if labels.shape != self.cfg.grid.dims:
            raise ValueError(f"labels shape {labels.shape} != grid {self.cfg.grid.dims}")
        if labels.max(initial=0) >= self.cfg.K or labels.min(initial=0) < -1:
            raise ValueError(f"labels outside [-1, {self.cfg.K})")
        idx = np.where(labels < 0, 0, labels).ravel()
        e = tn.embedding(self.params["embed"], idx)
        return tn.concat_channel(e, tn.Tensor(self.pe), axis=1)

    def embed(self, o) -> tn.Tensor:
        """(C, D, H, W) feature grid for an occupancy grid or label array."""
        labels = o.labels if isinstance(o, SemanticOccGrid) else o
        x = self.embed_raster(labels)
        return tn.reshape(tn.transpose(x), (self.cfg.C,) + self.cfg.grid.dims)

    def ssm_block(self, seq: tn.Tensor, name: str) -> tn.Tensor:
        """Gated diagonal selective scan with residual; O(L) in sequence length."""
        p = self.params
        width = p[f"{name}.W_u"].shape[0]
        if seq.shape[-1] != width:
            raise ValueError(f"{name}: width {seq.shape[-1]} != {width}")
        u = tn.linear(seq, p[f"{name}.W_u"])
        z = tn.linear(seq, p[f"{name}.W_z"])
        dt = tn.softplus(tn.linear(seq, p[f"{name}.W_dt"], p[f"{name}.b_dt"]))
        dt = tn.linear(dt, self._expand(width))
        decay = tn.exp(tn.neg(tn.mul(dt, tn.softplus(p[f"{name}.a"]))))
        drive = tn.mul(1.0 - decay, u)
        h = tn.scan(decay, drive)
        y = tn.mul(h, tn.silu(z))
        return tn.add(seq, tn.linear(y, p[f"{name}.W_o"]))

    def alpha(self) -> tn.Tensor:
        p = self.params
        return tn.exp(tn.neg(tn.mul(tn.softplus(p["istpf.A"]), tn.softplus(p["istpf.dt"]))))

    def istpf_step(self, g_pre: tn.Tensor, state: PersistentState, t_warp: np.ndarray,
                   warp=None) -> tuple[tn.Tensor, PersistentState]:
        """Gated state-space fusion.

        g_pre: (L, C) raster-ordered features.  ``t_warp`` re-anchors the stored
        state (sampled at inv(t_warp) p).  Returns (Y as (L, C_h), next state).
        """
        p = self.params
        Ch = self.cfg.C_h
        dims = self.cfg.grid.dims
        if g_pre.shape != (int(np.prod(dims)), self.cfg.C):
            raise ValueError(f"istpf: g_pre shape {g_pre.shape}")
        if state.S.shape != (Ch,) + dims:
            raise ValueError(f"istpf: state shape {state.S.shape}")
        M = warp if warp is not None else warp_matrix(t_warp, self.cfg.grid)
        s_warp = tn.transpose(tn.trilinear_sample(state.S, M))  # (L, C_h)
        x_h = tn.linear(g_pre, p["istpf.W_in"], p["istpf.b_in"])
        gate = tn.sigmoid(tn.linear(g_pre, p["istpf.W_g"], p["istpf.b_g"]))
        x_skip = tn.linear(g_pre, p["istpf.W_skip"], p["istpf.b_skip"])
        alpha = self.alpha()
        beta = tn.mul(1.0 - alpha, p["istpf.B"])
        s_next = tn.add(tn.mul(s_warp, alpha), tn.mul(x_h, beta))
        y_c = tn.mul(s_next, p["istpf.C"])
        y = tn.add(tn.mul(tn.linear(y_c, p["istpf.W_out"], p["istpf.b_out"]), gate),
                   tn.mul(x_skip, 1.0 - gate))
        S = tn.reshape(tn.transpose(s_next), (Ch,) + dims)
        return y, PersistentState(S, state.frame_index + 1)

    def srd_forward(self, f: tn.Tensor) -> tuple[tn.Tensor, tn.Tensor, dict]:
        """U-Net over a (C_h, D, H, W) grid -> logits (K, D, H, W), ego (1, 3).

        The third return value exposes intermediate grids for shape checks.
        """
        p = self.params

        def block(x, name, planar=False):
            return tn.silu(tn.conv3(x, p[f"srd.{name}.k"], p[f"srd.{name}.b"], planar_only=planar))

        _, H, W = f.shape[1:]
        if H % 4 or W % 4:
            raise ValueError(f"srd: H, W must be divisible by 4, got {f.shape}")
        e1 = block(f, "enc1")
        e2 = block(e1, "enc2", planar=True)
        e3 = block(e2, "enc3", planar=True)
        m = block(e3, "agg")
        u2 = block(tn.concat_channel(tn.upsample_planar(m), e2), "dec2")
        u1 = block(tn.concat_channel(tn.upsample_planar(u2), e1), "dec1")
        logits = tn.conv3(u1, p["srd.sem.k"], p["srd.sem.b"])
        pooled = tn.reshape(tn.mean(tn.reshape(u1, (u1.shape[0], -1)), axis=1), (1, -1))
        hidden = tn.silu(tn.linear(pooled, p["ego.W1"], p["ego.b1"]))
        ego = tn.linear(hidden, p["ego.W2"], p["ego.b2"])
        return logits, ego, {"E1": e1, "E2": e2, "E3": e3, "M": m, "U2": u2, "U1": u1}

    def step(self, labels, state: PersistentState, motion: np.ndarray, warp=None) -> StepOutput:
        """Ingest one occupancy frame.

        ``motion`` is the ego displacement from the state's frame to the frame of
        ``labels`` (relative-pose convention inv(T_prev) T_cur).  The state is
        re-anchored with its inverse, fused with the frame, and the decoder
        predicts the next frame and the next ego displacement.
        """
        if isinstance(labels, SemanticOccGrid):
            labels = labels.labels
        self.n_steps += 1
        fwd, inv = self.perm.forward, self.perm.inverse
        x = self.embed_raster(labels)
        seq = tn.gather(x, fwd, inverse=inv)
        g_pre = tn.gather(self.ssm_block(seq, "pre"), inv, inverse=fwd)
        y, s_next = self.istpf_step(g_pre, state, None if warp is not None else reanchor(motion),
                                    warp=warp)
        y_seq = tn.gather(y, fwd, inverse=inv)
        f = tn.gather(self.ssm_block(y_seq, "post"), inv, inverse=fwd)
        f_grid = tn.reshape(tn.transpose(f), (self.cfg.C_h,) + self.cfg.grid.dims)
        logits, ego, _ = self.srd_forward(f_grid)
        return StepOutput(logits, ego, s_next)


def model_step(model: OccWorldModel, o_in, state: PersistentState, motion: np.ndarray):
    """Functional form: (class probabilities, PlanarMotion, next state)."""
    with tn.no_grad():
        out = model.step(o_in, state, motion)
    return out.probs(), out.ego_motion(), out.state


def detach_state(state: PersistentState) -> PersistentState:
    return PersistentState(tn.Tensor(state.S.data), state.frame_index)


__all__ = ["ModelConfig", "OccWorldModel", "PersistentState", "StepOutput", "model_step",
           "init_params", "fourier_encoding", "full_scale_config", "detach_state", "replace"]
