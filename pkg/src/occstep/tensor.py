"""Minimal reverse-mode autodiff over numpy arrays.

Only the handful of operators the world model needs are provided, each with a
hand-written backward rule.  Broadcasting is limited to python scalars and to
1-D vectors matching the trailing axis of the other operand.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> backward(sum(x * x))
    >>> x.grad
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import math
import os
import threading

import numpy as np
import scipy.sparse as sp

DEFAULT_DTYPE = np.float32
_DEBUG = bool(os.environ.get("OCCSTEP_DEBUG"))
_GRAD = threading.local()  # per-thread switch so parallel evaluation stays isolated


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check that runs after every operator."""
    global _DEBUG
    _DEBUG = bool(flag)


def grad_enabled() -> bool:
    return getattr(_GRAD, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o) if isinstance(o, Tensor) else -o)

    def __rsub__(self, o):
        return add(neg(self), o)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


# ------------------------------------------------------------------ tape


class Tape:
    """Topologically ordered record of the ops reachable from a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> list[Tensor]:
    """Populate ``.grad`` on every tensor that requires it; returns the leaves reached."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    tape = tape or Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


# ------------------------------------------------------------------ elementwise


def _operand(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def wrap_angle(a) -> Tensor:
    """Wrap to (-pi, pi]; the gradient is the identity almost everywhere."""
    a = as_tensor(a)
    out = -(np.mod(-a.data + np.pi, 2 * np.pi) - np.pi)
    return _make(out.astype(a.dtype, copy=False), (a,), lambda g: (g,), "wrap_angle")


# ------------------------------------------------------------------ reductions / shape


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / n, a.shape),), "mean")
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape),)

    return _make(a.data.mean(axis=axis), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def gather(a, index, axis=0, inverse=None) -> Tensor:
    """Select entries along ``axis``.  Pass ``inverse`` when ``index`` is a bijection."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), index, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, (a,), bw, "gather")


def concat_channel(a, b, axis=0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    other = [s for i, s in enumerate(a.shape) if i != axis % a.data.ndim]
    if a.data.ndim != b.data.ndim or other != [s for i, s in enumerate(b.shape) if i != axis % b.data.ndim]:
        raise ValueError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[axis]

    def bw(g):
        ga, gb = np.split(g, [n], axis=axis)
        return ga, gb

    return _make(np.concatenate([a.data, b.data], axis=axis), (a, b), bw, "concat")


def embedding(table, labels) -> Tensor:
    """Rows of ``table`` (K, C) indexed by integer ``labels`` of any shape."""
    table = as_tensor(table)
    labels = np.asarray(labels, dtype=np.int64)
    out = table.data[labels]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, labels.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), bw, "embedding")


# ------------------------------------------------------------------ linear maps


def linear(x, W, b=None) -> Tensor:
    """x (N, Cin) @ W (Cin, Cout) + b (Cout,)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: cannot apply {W.shape} to {x.shape}")
    out = x.data @ W.data
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        grads = [g @ W.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "linear")


def _conv_geometry(shape, ksize, stride):
    pads = tuple(k // 2 for k in ksize)
    out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(shape, pads, ksize, stride))
    return pads, out


def conv3(x, k, b=None, stride=1, planar_only=False) -> Tensor:
    """3-D convolution with 'same' zero padding.

    x: (C, D, H, W); k: (Co, C, kd, kh, kw); b: (Co,).  ``planar_only`` forces
    stride (1, 2, 2), halving H and W while keeping D.
    """
    x, k = as_tensor(x), as_tensor(k)
    if planar_only:
        stride = (1, 2, 2)
    elif isinstance(stride, int):
        stride = (stride,) * 3
    if x.data.ndim != 4 or k.data.ndim != 5 or k.shape[1] != x.shape[0]:
        raise ValueError(f"conv3: kernel {k.shape} incompatible with input {x.shape}")
    C = x.shape[0]
    Co, _, kd, kh, kw = k.shape
    pads, (Do, Ho, Wo) = _conv_geometry(x.shape[1:], (kd, kh, kw), stride)
    sd, sh, sw = stride
    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pads))
    # im2col by 27 slice copies; far faster than a transposed window view
    cols = np.empty((C, kd, kh, kw, Do, Ho, Wo), dtype=xp.dtype)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                cols[:, a, bb, c] = xp[:, a : a + (Do - 1) * sd + 1 : sd,
                                       bb : bb + (Ho - 1) * sh + 1 : sh,
                                       c : c + (Wo - 1) * sw + 1 : sw]
    cols = cols.reshape(C * kd * kh * kw, -1)
    kmat = k.data.reshape(Co, -1)
    out = kmat @ cols
    parents = [x, k]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Co,):
            raise ValueError(f"conv3: bias shape {b.shape} != ({Co},)")
        out += b.data[:, None]
        parents.append(b)
    out = out.reshape(Co, Do, Ho, Wo)

    def bw(g):
        g2 = g.reshape(Co, -1)
        gk = (g2 @ cols.T).reshape(k.shape)
        gcols = (kmat.T @ g2).reshape(C, kd, kh, kw, Do, Ho, Wo)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    gxp[:, a : a + (Do - 1) * sd + 1 : sd,
                        bb : bb + (Ho - 1) * sh + 1 : sh,
                        c : c + (Wo - 1) * sw + 1 : sw] += gcols[:, a, bb, c]
        pd, ph, pw = pads
        gx = gxp[:, pd : pd + x.shape[1], ph : ph + x.shape[2], pw : pw + x.shape[3]]
        grads = [gx, gk]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "conv3")


def upsample_planar(x) -> Tensor:
    """Nearest-neighbour doubling of H and W for a (C, D, H, W) grid."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        C, D, H, W = x.shape
        return (g.reshape(C, D, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_planar")


# ------------------------------------------------------------------ normalisation / losses


def softmax_channel(x, axis=0) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax_np(z: np.ndarray, axis=0) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target, ignore_index=-1) -> Tensor:
    """Mean voxel-wise CE; logits (K, ...) and integer target (...).

    Voxels equal to ``ignore_index`` are excluded from numerator and count.  If
    every voxel is ignored the result is 0 with a zero gradient.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    K = logits.shape[0]
    if logits.shape[1:] != target.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    flat = logits.data.reshape(K, -1)
    t = target.ravel()
    valid = t != ignore_index
    n = int(valid.sum())
    if n and (t[valid].max() >= K or t[valid].min() < 0):
        raise ValueError("cross_entropy: target class out of range")
    logp = log_softmax_np(flat, axis=0)
    cols = np.nonzero(valid)[0]
    loss = -logp[t[cols], cols].sum() / n if n else 0.0

    def bw(g):
        if not n:
            return (np.zeros_like(logits.data),)
        grad = np.exp(logp)
        grad[t[cols], cols] -= 1.0
        grad[:, ~valid] = 0.0
        return ((g / n) * grad.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def smooth_l1(a, b, beta=1.0) -> Tensor:
    """Mean Huber-style smooth L1 between equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1: shapes {a.shape} vs {b.shape}")
    d = a.data - b.data
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta).mean()
    n = d.size

    def bw(g):
        gd = g * np.where(ad < beta, d / beta, np.sign(d)) / n
        return gd, -gd

    return _make(np.asarray(val, dtype=a.dtype), (a, b), bw, "smooth_l1")


# ------------------------------------------------------------------ sampling and scan


def trilinear_matrix(coords: np.ndarray, dims) -> sp.csr_matrix:
    """Sparse (N, D*H*W) interpolation matrix for fractional (d, h, w) coordinates.

    Corners outside the grid get zero weight.  Coordinates within 1e-9 of an
    integer are snapped so integer shifts are exact permutations.
    """
    coords = np.asarray(coords, dtype=np.float64)
    near = np.round(coords)
    coords = np.where(np.abs(coords - near) < 1e-9, near, coords)
    D, H, W = dims
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    N = coords.shape[0]
    rows, cols, vals = [], [], []
    ar = np.arange(N)
    for cd in (0, 1):
        wd = frac[:, 0] if cd else 1 - frac[:, 0]
        d = base[:, 0] + cd
        for ch in (0, 1):
            wh = frac[:, 1] if ch else 1 - frac[:, 1]
            h = base[:, 1] + ch
            for cw in (0, 1):
                ww = frac[:, 2] if cw else 1 - frac[:, 2]
                w = base[:, 2] + cw
                wt = wd * wh * ww
                ok = (d >= 0) & (d < D) & (h >= 0) & (h < H) & (w >= 0) & (w < W) & (wt != 0)
                rows.append(ar[ok])
                cols.append((d[ok] * H + h[ok]) * W + w[ok])
                vals.append(wt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, D * H * W))


def trilinear_sample(field, coords) -> Tensor:
    """Sample a (C, D, H, W) field at (N, 3) fractional voxel coordinates -> (C, N).

    ``coords`` may be a precomputed matrix from :func:`trilinear_matrix`.
    Differentiable with respect to the field only.
    """
    field = as_tensor(field)
    if field.data.ndim != 4:
        raise ValueError(f"trilinear_sample: field must be (C, D, H, W), got {field.shape}")
    C = field.shape[0]
    M = coords if sp.issparse(coords) else trilinear_matrix(coords, field.shape[1:])
    if M.shape[1] != np.prod(field.shape[1:]):
        raise ValueError("trilinear_sample: matrix does not match field size")
    flat = field.data.reshape(C, -1)
    M = M.astype(field.dtype)
    out = np.ascontiguousarray((M @ flat.T).T)

    def bw(g):
        return (np.ascontiguousarray((M.T @ g.T).T).reshape(field.shape),)

    return _make(out, (field,), bw, "trilinear_sample")


def _scan_np(decay: np.ndarray, drive: np.ndarray, chunk: int | None = None) -> np.ndarray:
    """h_i = decay_i * h_{i-1} + drive_i along axis 0, with h_{-1} = 0.

    Two-level evaluation: a sequential pass inside fixed-size chunks (vectorised
    across chunks), then a short sequential carry pass across chunk ends.  Work
    is O(L); the number of python-level steps is O(sqrt(L)).
    """
    L = decay.shape[0]
    if L == 0:
        return drive.copy()
    c = chunk or max(1, int(math.isqrt(L)))
    n = -(-L // c)
    pad = n * c - L
    tail = decay.shape[1:]
    a = np.concatenate([decay, np.zeros((pad,) + tail, decay.dtype)]) if pad else decay
    b = np.concatenate([drive, np.zeros((pad,) + tail, drive.dtype)]) if pad else drive
    a = a.reshape((n, c) + tail)
    b = b.reshape((n, c) + tail)
    hl = np.empty_like(b)
    hl[:, 0] = b[:, 0]
    for i in range(1, c):
        hl[:, i] = a[:, i] * hl[:, i - 1] + b[:, i]
    P = np.cumprod(a, axis=1)
    carry = np.zeros((n,) + tail, dtype=b.dtype)
    for j in range(1, n):
        carry[j] = hl[j - 1, -1] + P[j - 1, -1] * carry[j - 1]
    h = hl + P * carry[:, None]
    return h.reshape((n * c,) + tail)[:L]


def scan(decay, drive) -> Tensor:
    """Selective linear recurrence over the leading (sequence) axis."""
    decay, drive = as_tensor(decay), as_tensor(drive)
    if decay.shape != drive.shape:
        raise ValueError(f"scan: decay {decay.shape} vs drive {drive.shape}")
    a, b = decay.data, drive.data
    h = _scan_np(a, b)

    def bw(g):
        a_next = np.concatenate([a[1:], np.zeros_like(a[:1])])
        r = _scan_np(a_next[::-1], g[::-1])[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        return r * h_prev, r

    return _make(h, (decay, drive), bw, "scan")


# ------------------------------------------------------------------ checking and optimisation


def grad_check(op, sample_inputs, eps=1e-6, seed=0, floor=1e-8, max_checks=None) -> float:
    """Max relative error between backward() and central differences.

    ``op`` maps Tensors to a Tensor; its output is contracted with a fixed
    random tensor to get a scalar.  Float inputs are promoted to float64.
    ``max_checks`` caps the probed entries per input (chosen at random).
    """
    inputs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True)
              if np.issubdtype(np.asarray(x).dtype, np.floating) else x
              for x in sample_inputs]
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    probe_rng = np.random.default_rng(seed)
    probe = None

    def scalar():
        nonlocal probe
        out = op(*inputs)
        if probe is None:
            probe = probe_rng.standard_normal(out.shape)
        return out, float((out.data * probe).sum())

    out, _ = scalar()
    backward(sum(mul(out, Tensor(probe, dtype=np.float64))))
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = probe_rng.choice(flat.size, size=max_checks, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = scalar()[1]
                flat[i] = orig - eps
                fm = scalar()[1]
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(floor, abs(numeric))
                worst = max(worst, err)
    return worst


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src
