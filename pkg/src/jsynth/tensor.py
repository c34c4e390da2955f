"""Reverse-mode automatic differentiation on numpy arrays.

Only the handful of layers a 2D U-Net needs are provided. Every op records a
node on the active tape when any input requires a gradient; ``backward``
replays the reachable nodes in reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
BCE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from its inputs."""


class ComputationTape:
    """Execution record shared by all ops.

    Nodes carry a sequence number from ``counter`` so that backward can visit
    them in reverse execution order. Recording is switched off inside
    :func:`no_grad`.
    """

    def __init__(self):
        self.enabled = True
        self.counter = itertools.count()
        self.branches: list[bytes] | None = None


_TAPE = ComputationTape()


@contextlib.contextmanager
def branch_trace():
    """Collect the branch decisions of piecewise ops (LeakyReLU sign, max-pool argmax, BCE clamp).

    Two evaluations with equal traces lie on the same smooth piece, which is
    what makes a finite-difference comparison meaningful.
    """
    prev = _TAPE.branches
    _TAPE.branches = trace = []
    try:
        yield trace
    finally:
        _TAPE.branches = prev


def _record_branch(arr: np.ndarray):
    if _TAPE.branches is not None:
        _TAPE.branches.append(np.packbits(arr.reshape(-1)).tobytes() if arr.dtype == bool else arr.tobytes())


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class _Node:
    __slots__ = ("inputs", "backward", "seq")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_TAPE.counter)


class Tensor:
    """Dense float array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward op produced non-finite values")
    out = Tensor(data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(tuple(inputs), backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is not None and id(node) not in nodes:
            nodes[id(node)] = node
            stack.extend(node.inputs)
    pending = {id(loss._node): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE, copy=True)
                else:
                    t.grad += gi
            else:
                key = id(t._node)
                pending[key] = pending[key] + gi if key in pending else gi


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, k) -> Tensor:
    """Multiply by a python scalar or an equal-shaped tensor."""
    a = as_tensor(a)
    if isinstance(k, Tensor):
        if a.shape != k.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {k.shape} differ")
        return _make(a.data * k.data, (a, k), lambda g: (g * k.data, g * a.data))
    k = float(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    _record_branch(x.data >= 0)
    factor = np.where(x.data >= 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where float64 saturates
    out = np.clip(out, np.finfo(DTYPE).tiny, 1.0 - np.finfo(DTYPE).epsneg)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- losses


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean two-sided binary cross-entropy; predictions clamped to [1e-7, 1-1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != t.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target values must be 0 or 1")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)
    _record_branch(inside)

    def bw(g):
        return (g * inside * (p - t) / (p * (1.0 - p)) / n,)

    return _make(np.asarray(loss), (pred,), bw)


def l2_loss(a: Tensor, b) -> Tensor:
    """Mean squared difference over all elements."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = 2.0 * g * diff / n
        return d, -d

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bw)


# ---------------------------------------------------------------- layers


def _check_4d(x: Tensor, name: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D (N, C, H, W) input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Columns laid out as (Cin, kH, kW, N, H', W') so the GEMM runs over contiguous rows."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding."""
    _check_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Cout, Cin, kH, kW), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels (dim 1) = {cin} but weight expects Cin = {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv2d: need padding >= 0 and stride >= 1, got {padding}, {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout = {cout}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw or (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d: output size is not integral for H={h}, W={w}, kernel {kh}x{kw}, "
            f"padding {padding}, stride {stride}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, ho, wo, stride).reshape(cin * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gx = gw = gb = None
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first cell in row-major order."""
    _check_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    idx = blocks.argmax(axis=-1)
    _record_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, window * window), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    _check_4d(x, "upsample_nearest2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    for dim, name in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[dim] != b.shape[dim]:
            raise ShapeError(f"concat_channels: {name} (dim {dim}) differs: {a.shape[dim]} vs {b.shape[dim]}")
    ca = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
    update_stats: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and, if ``update_stats``,
    folded into ``state`` by an exponential moving average. Evaluation mode
    reads ``state`` only.
    """
    _check_4d(x, "batch_norm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta must have shape ({c},)")
    g4, b4 = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    if training:
        if n < 2:
            raise ShapeError("batch_norm2d: training mode needs batch size >= 2")
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        if update_stats:
            state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var = (1 - momentum) * state.running_var + momentum * var * m / (m - 1)

        def bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat_sum = (gb * gamma.data)[None, :, None, None]
                dxhat_dot = (gg * gamma.data)[None, :, None, None]
                gx = (g * g4 - dxhat_sum / m - xhat * dxhat_dot / m) * inv_std[None, :, None, None]
            return gx, gg, gb
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def bw(g):
            gx = g * g4 * inv_std[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * g4 + b4, (x, gamma, beta), bw)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction. Holds the per-parameter moment buffers."""

    def __init__(self, params: Iterable[Tensor], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"adam_step: parameter {i} with shape {p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad.fill(0.0)


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: parameter set does not match optimizer state")
    state.step()


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place).

    ``coords`` restricts the estimate to the listed flat indices; the other
    entries of the result are NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], np.asarray(numeric)[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)
