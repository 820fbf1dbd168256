"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the encoder, attention and loss need are provided.
Spatial tensors are channels-last: ``(..., H, W, C)``.  Every op keeps the
dtype of its inputs, so switching a whole computation to 64-bit is a matter
of casting the leaves (see :func:`as_float64`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """Dense array that optionally participates in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other, self))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# tape


@dataclass
class GradientTape:
    """Operations reachable from a loss, in execution (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "GradientTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            # consume the tape: release saved inputs
            node._parents = ()
            node._grad_fn = None
            node.requires_grad = False
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    GradientTape.record(loss).replay(loss)


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of clamping it to 0
    return _make(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    shifted = x.data + x.dtype.type(eps)
    return _make(np.log(shifted), (x,), lambda g: (g / shifted,))


def total(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    data = np.array([x.data for x in xs], dtype=xs[0].dtype)
    return _make(data, tuple(xs), lambda g: tuple(np.asarray(gi) for gi in g))


def take(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""

    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return _make(x.data[i], (x,), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit length."""
    norm = np.sqrt((x.data**2).sum(-1, keepdims=True) + eps)
    y = x.data / norm

    def grad_fn(g):
        return ((g - y * (g * y).sum(-1, keepdims=True)) / norm,)

    return _make(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# softmax / loss


def softmax_over(x: Tensor, axes: int | Sequence[int] = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax normalized jointly over ``axes``; masked-out entries are exactly 0.

    ``mask`` must broadcast against ``x`` and leave at least one entry per
    normalization group.
    """
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axes).all():
            raise ValueError("softmax_over: a normalization group is fully masked (empty window)")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return _make(y.astype(x.dtype, copy=False), (x,), grad_fn)


def nll_of_probs(probs: Tensor, targets: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Mean cross-entropy of probability maps ``(..., K)`` against integer ids.

    ``probs`` already sums to one along the last axis (it is a soft copy of
    distributions), so no softmax is applied here.
    """
    targets = np.asarray(targets)
    if probs.shape[:-1] != targets.shape:
        raise ShapeError(f"nll: probs {probs.shape} vs targets {targets.shape}")
    flat = probs.data.reshape(-1, probs.shape[-1])
    idx = targets.reshape(-1).astype(np.int64)
    picked = flat[np.arange(idx.size), idx] + probs.dtype.type(eps)
    n = idx.size
    loss = np.asarray(-np.log(picked).mean(), dtype=probs.dtype)

    def grad_fn(g):
        out = np.zeros_like(flat)
        out[np.arange(n), idx] = -g / (n * picked)
        return (out.reshape(probs.shape),)

    return _make(loss, (probs,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and normalization


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of ``(B, H, W, Cin)`` with ``(kh, kw, Cin, Cout)``.

    ``pad`` defaults to ``kh // 2``, which gives output extent ``ceil(H/stride)``
    for odd kernels.  A 3-D input is treated as a batch of one.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[-1]} channels, kernel expects Cin={cin} (kernel shape {kernel.shape})")
    pad = kh // 2 if pad is None else pad
    b, h, w, _ = xd.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.reshape(b * ho * wo, cin * kh * kw)
    wmat = kernel.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = (cols @ wmat).reshape(b, ho, wo, cout)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(b * ho * wo, cout)
        dk = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        dcols = (g2 @ wmat.T).reshape(b, ho, wo, cin, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., i, j]
        dx = dxp[:, pad : pad + h, pad : pad + w, :]
        return (dx[0] if squeeze else dx, dk)

    return _make(out, (x, kernel), grad_fn)


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by one normalization layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batch_norm(
    x: Tensor,
    scale_: Tensor,
    shift: Tensor,
    stats: RunningStats,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize over every axis but the last (channels).

    Train mode uses batch statistics and updates ``stats`` in place with the
    unbiased variance; eval mode is a fixed affine map from ``stats``.
    """
    c = x.shape[-1]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must have length {c}")
    axes = tuple(range(x.data.ndim - 1))
    gamma, beta = scale_.data, shift.data
    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var.astype(x.dtype) + x.dtype.type(eps))
        xhat = (x.data - stats.mean.astype(x.dtype)) * inv
        out = xhat * gamma + beta

        def grad_eval(g):
            return (g * gamma * inv, (g * xhat).sum(axes), g.sum(axes))

        return _make(out, (x, scale_, shift), grad_eval)
    if mode != "train":
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    n = x.data.size // c
    mu = x.data.mean(axes)
    var = x.data.var(axes)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * gamma + beta
    unbiased = var * n / max(n - 1, 1)
    stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
    stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased

    def grad_train(g):
        dxhat = g * gamma
        dx = inv * (dxhat - dxhat.mean(axes) - xhat * (dxhat * xhat).mean(axes))
        return (dx, (g * xhat).sum(axes), g.sum(axes))

    return _make(out, (x, scale_, shift), grad_train)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# verification


def as_float64(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copy of ``params`` in 64-bit, each flagged ``requires_grad``."""
    return {k: Tensor(p.data.astype(np.float64), requires_grad=True, name=k) for k, p in params.items()}


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` is re-evaluated with each sampled coordinate perturbed by
    ``±eps * max(1, |theta|)``; it must be deterministic.  The error for a
    coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        p.requires_grad = True
        p.grad = None
    backward(loss_fn())
    coords = [(pi, j) for pi, p in enumerate(plist) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    worst = 0.0
    for pi, j in coords:
        p = plist[pi]
        flat = p.data.reshape(-1)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
        orig = flat[j]
        h = eps * max(1.0, abs(float(orig)))
        flat[j] = orig + h
        up = float(loss_fn().data)
        flat[j] = orig - h
        down = float(loss_fn().data)
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst
