"""Dense float32 tensors with a small reverse-mode tape.

The op set is fixed: elementwise arithmetic, reductions, reshapes, matmul,
im2col convolution, max pooling and batch normalization. Ops record
themselves on the active :class:`Tape` (see :meth:`Tape.recording`) when at
least one input requires a gradient.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5

_dtype: contextvars.ContextVar = contextvars.ContextVar("tacsnn_dtype", default=np.float32)
_active: contextvars.ContextVar = contextvars.ContextVar("tacsnn_tape", default=None)


class ShapeError(ValueError):
    """Raised when an operand has the wrong shape; ``dimension`` names the culprit."""

    def __init__(self, message: str, dimension: str | None = None):
        super().__init__(message)
        self.dimension = dimension


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Float32 is the working precision; float64 exists for gradient checking.
    """
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_dtype.get())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of ops; single writer, one per training step."""

    nodes: list[_Node] = field(default_factory=list)

    @contextlib.contextmanager
    def recording(self):
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _active.get()


def from_op(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result and register ``backward`` on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Other modules use this to define ops with custom backward rules.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active.get()
    if needs and tape is not None:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] = ()) -> None:
    """Replay ``tape`` in reverse and accumulate into ``.grad``.

    Tensors in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}", "loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _accumulate(node.output, g)
        owners.pop(id(node.output), None)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    for key, g in grads.items():
        _accumulate(owners[key], g)
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar (not a differentiable input)."""
    c = a.data.dtype.type(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def cos(a: Tensor) -> Tensor:
    return from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return from_op(a.data * mask, (a,), lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the tape: contributes no gradient upstream."""
    return Tensor(a.data, requires_grad=False)


# --- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new leading axis (used for [T, ...] spike trains)."""
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    data = np.stack([t.data for t in tensors])
    return from_op(data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def index(a: Tensor, i: int) -> Tensor:
    """Select ``a[i]`` along the leading axis."""
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return from_op(a.data[i], (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}", "in_features")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return from_op(out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    return from_op(out + bias.data, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# --- losses ------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [B, C] logits against integer labels."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = -logp[np.arange(b), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return from_op(np.asarray(loss), (logits,), bwd)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {pred.shape}", "target")
    diff = pred.data - target
    n = diff.size
    return from_op(np.asarray((diff ** 2).mean()), (pred,), lambda g: (g * 2.0 * diff / n,))


# --- convolution -------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be non-negative")

    def output_extent(self, n: int) -> int:
        out = (n + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ShapeError(f"kernel {self.kernel_size} does not fit input extent {n} "
                             f"with padding {self.padding}", "spatial")
        return out

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


def im2col(x: np.ndarray, kernel_size: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unroll [B, C, H, W] into a [B*H'*W', C*k*k] patch matrix (row-major patches)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel_size, kernel_size), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kernel_size * kernel_size)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """2-D cross-correlation with zero padding, lowered to im2col + GEMM."""
    if spec is None:
        co, ci, k, _ = weight.shape
        spec = ConvSpec(ci, co, k)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B, C, H, W], got shape {x.shape}", "rank")
    b, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}", "in_channels")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}", "weight")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)", "bias")
    if not np.isfinite(x.data).all():
        raise ValueError("conv2d input contains non-finite values")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    cols = im2col(x.data, k, s, p)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, spec.out_channels).transpose(0, 3, 1, 2))

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = _col2im(gm @ wmat, x.shape, k, s, p, ho, wo) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, inputs, bwd)


def linearity_check(weight: Tensor, inputs: Sequence[Tensor], coeffs: Sequence[float],
                    spec: ConvSpec | None = None) -> float:
    """Max |conv(sum c_i x_i) - sum c_i conv(x_i)|; zero up to rounding."""
    if not inputs:
        raise ValueError("linearity_check needs at least one input")
    if len(inputs) != len(coeffs):
        raise ValueError("inputs and coeffs differ in length")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ShapeError("all inputs must share one shape", "inputs")
    dt = inputs[0].data.dtype.type
    combined = sum_scaled([t.data for t in inputs], [dt(c) for c in coeffs])
    lhs = conv2d(Tensor(combined), weight, None, spec).data
    rhs = sum_scaled([conv2d(t, weight, None, spec).data for t in inputs], [dt(c) for c in coeffs])
    return float(np.max(np.abs(lhs - rhs)))


def sum_scaled(arrays: Sequence[np.ndarray], coeffs: Sequence[float]) -> np.ndarray:
    out = arrays[0] * coeffs[0]
    for a, c in zip(arrays[1:], coeffs[1:]):
        out = out + a * c
    return out


# --- pooling -----------------------------------------------------------------

def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pool; gradient goes to the first max in row-major order."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by window {window}", "spatial")
    hp, wp = h // window, w // window
    blocks = x.data.reshape(b, c, hp, window, wp, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, hp, wp, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros((b, c, hp, wp, window * window), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, hp, wp, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return from_op(out, (x,), bwd)


# --- batch normalization -----------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics (shared across timesteps)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        dt = _dtype.get()
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name="bn.gamma"),
            beta=Tensor(np.zeros(channels), requires_grad=True, name="bn.beta"),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize [B, C, H, W] per channel.

    ``train`` uses this call's batch moments and folds them into the running
    statistics; ``eval`` uses the running statistics.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm expects [B, {state.channels}, H, W], got {x.shape}", "channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    xd = x.data
    gamma = state.gamma.data.reshape(1, -1, 1, 1)
    shift = state.beta.data.reshape(1, -1, 1, 1)
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        n = xd.size // xd.shape[1]
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mu
        state.running_var[:] = (1 - m) * state.running_var + m * var * (n / max(n - 1, 1))
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(xd.dtype).reshape(1, -1, 1, 1)
    xhat = (xd - mu.reshape(1, -1, 1, 1)) * inv_std
    out = gamma * xhat + shift

    def bwd(g):
        axes = (0, 2, 3)
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma
        if mode == "eval":
            return dxhat * inv_std, ggamma, gbeta
        n = xd.size // xd.shape[1]
        gx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return from_op(out, (x, state.gamma, state.beta), bwd)


def kaiming_uniform(shape: Sequence[int], fan_in: int, rng: np.random.Generator, name: str | None = None,
                    a: float = math.sqrt(5)) -> Tensor:
    """He-uniform init with leaky-ReLU slope ``a``: bound = sqrt(6 / ((1 + a^2) fan_in)).

    The default a = sqrt(5) gives bound 1/sqrt(fan_in), the usual default
    for conv and linear layers; a = 0 gives the ReLU bound sqrt(6 / fan_in).
    """
    bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
