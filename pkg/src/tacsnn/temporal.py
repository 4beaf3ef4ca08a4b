"""Temporal operators over spike trains.

All layer forwards share one shape: per call, a spatial convolution (counted
on an explicit :class:`CallCounter`), an optional post-op such as batch
normalization, then neuron dynamics. They differ only in how many frames feed
one convolution and how many neuron steps consume its output:

==========  ===================  ==================  ===============
kind        conv calls           neuron steps        output extent
==========  ===================  ==================  ===============
baseline    T                    T                   T
tac         T / K                T / K (decay b^K)   T / K
tac_tp      T / K                T                   T
tcc         non-silent frames    T                   T
ftc         T                    T (biquad)          T
imc         T                    T                   T
==========  ===================  ==================  ===============
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .neuron import LIFParams, LIFState, SurrogateSpec, lif_step, spike
from .tensor import ConvSpec, ShapeError, Tensor

KINDS = ("baseline", "tac", "tac_tp", "tcc", "ftc", "imc")
GROUPED = ("tac", "tac_tp")


class GroupSizeError(ValueError):
    """Group size does not divide the temporal extent."""


class TemporalResolutionError(ValueError):
    """A cascade of collapsing layers would leave fewer than one timestep."""


class GateError(ValueError):
    """Channel gating cannot meet the information target."""


@dataclass
class CallCounter:
    """Monotone count of convolution invocations for one run."""

    conv_calls: int = 0

    def tick(self, n: int = 1) -> None:
        self.conv_calls += n


@dataclass
class SpikeTrain:
    """Frames ``S_t`` of shape [B, C, H, W] for t = 0..T-1."""

    frames: list[Tensor]
    binary: bool = True

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a spike train needs T >= 1 frames")

    @classmethod
    def from_array(cls, data, binary: bool | None = None, requires_grad: bool = False) -> "SpikeTrain":
        data = np.asarray(data)
        if data.ndim != 5:
            raise ShapeError(f"spike train array must be [T, B, C, H, W], got {data.shape}", "rank")
        is_binary = bool(np.isin(data, (0, 1)).all())
        if binary is None:
            binary = is_binary
        elif binary and not is_binary:
            raise ValueError("binary spike train holds values outside {0, 1}")
        return cls([Tensor(f, requires_grad=requires_grad) for f in data], binary=binary)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.frames[0].shape

    def array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])

    def map(self, fn: Callable[[Tensor], Tensor]) -> "SpikeTrain":
        return SpikeTrain([fn(f) for f in self.frames], binary=self.binary)


@dataclass
class Conv:
    """Convolution weights and geometry."""

    weight: Tensor
    spec: ConvSpec
    bias: Tensor | None = None

    def __call__(self, x: Tensor, counter: CallCounter | None = None) -> Tensor:
        if counter is not None:
            counter.tick()
        return tc.conv2d(x, self.weight, self.bias, self.spec)

    def silent(self, x: Tensor) -> Tensor:
        """What the convolution returns for an all-zero ``x``, without running it."""
        b, _, h, w = x.shape
        shape = (b, self.spec.out_channels, self.spec.output_extent(h), self.spec.output_extent(w))
        if self.bias is None:
            return Tensor(np.zeros(shape))
        bias = self.bias
        data = np.zeros(shape, dtype=bias.data.dtype) + bias.data.reshape(1, -1, 1, 1)
        return tc.from_op(data, (bias,), lambda g: (g.sum(axis=(0, 2, 3)),))


@dataclass
class BiquadFilter:
    """Second-order IIR filter with poles at ``r e^{+-i theta}``, ``r = sigmoid(r_raw)``.

    ``fixed_poles`` pins (a1, a2) directly instead; it exists for filters
    outside the conjugate-pole family, such as the first-order LIF filter.
    """

    b0: Tensor
    b1: Tensor
    b2: Tensor
    r_raw: Tensor
    theta: Tensor
    fixed_poles: tuple[float, float] | None = None

    @classmethod
    def create(cls, b=(1.0, 0.0, 0.0), r_raw: float = 0.0, theta: float = 0.0,
               trainable: bool = True) -> "BiquadFilter":
        if not 0.0 <= theta <= math.pi:
            raise ValueError(f"theta must lie in [0, pi], got {theta}")

        def p(v, name):
            return Tensor(np.asarray(v), requires_grad=trainable, name=f"ftc.{name}")

        return cls(p(b[0], "b0"), p(b[1], "b1"), p(b[2], "b2"), p(r_raw, "r_raw"), p(theta, "theta"))

    @classmethod
    def from_coefficients(cls, b0: float, b1: float, b2: float, a1: float, a2: float) -> "BiquadFilter":
        # Schur-Cohn stability triangle for 1 + a1 z^-1 + a2 z^-2
        if not (abs(a2) < 1 and abs(a1) < 1 + a2):
            raise ValueError(f"poles of (a1={a1}, a2={a2}) are not strictly inside the unit circle")
        f = cls.create((b0, b1, b2), trainable=False)
        f.fixed_poles = (float(a1), float(a2))
        return f

    @property
    def radius(self) -> float:
        if self.fixed_poles is not None:
            roots = np.roots([1.0, *self.fixed_poles])
            return float(np.max(np.abs(roots)))
        return float(1.0 / (1.0 + np.exp(-self.r_raw.item())))

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.b0, self.b1, self.b2, self.r_raw, self.theta) if t.requires_grad]

    def coefficients(self) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        if self.fixed_poles is not None:
            a1, a2 = (Tensor(np.asarray(a)) for a in self.fixed_poles)
        else:
            r = tc.sigmoid(self.r_raw)
            a1 = tc.scale(tc.mul(r, tc.cos(self.theta)), -2.0)
            a2 = tc.mul(r, r)
        return self.b0, self.b1, self.b2, a1, a2

    def impulse_response(self, n: int) -> np.ndarray:
        """First ``n`` samples of h[n], by direct recursion in float64."""
        b0, b1, b2, a1, a2 = (float(t.item()) for t in self.coefficients())
        x = np.zeros(n)
        x[0] = 1.0
        y = np.zeros(n)
        for i in range(n):
            y[i] = (b0 * x[i] + (b1 * x[i - 1] if i >= 1 else 0.0) + (b2 * x[i - 2] if i >= 2 else 0.0)
                    - (a1 * y[i - 1] if i >= 1 else 0.0) - (a2 * y[i - 2] if i >= 2 else 0.0))
        return y


@dataclass
class ChannelGateSpec:
    info_target_bits: float
    measured_rates: np.ndarray | None = None
    gate_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.info_target_bits > 0:
            raise ValueError("info_target_bits must be positive")


@dataclass(frozen=True)
class TemporalOpConfig:
    kind: str = "baseline"
    group_size: int = 1
    ftc_filter: BiquadFilter | None = field(default=None, compare=False)
    imc_gate: ChannelGateSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown temporal op {self.kind!r}; expected one of {KINDS}")
        if self.group_size < 1:
            raise ValueError("group_size must be a positive integer")
        if self.kind not in GROUPED and self.group_size != 1:
            raise ValueError(f"group_size applies only to {GROUPED}, not {self.kind!r}")

    @property
    def collapses(self) -> bool:
        return self.kind == "tac"


# --- core operators ----------------------------------------------------------

def aggregate(frames: Sequence[Tensor], beta: float) -> Tensor:
    """``sum_j beta**(K-1-j) * S_j``: the newest frame has weight 1."""
    k = len(frames)
    if k == 0:
        raise ValueError("cannot aggregate an empty group")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ShapeError("frames in a group must share one shape", "frames")
    if k == 1:
        return frames[0]
    acc = tc.scale(frames[0], beta ** (k - 1))
    for j in range(1, k - 1):
        acc = tc.add(acc, tc.scale(frames[j], beta ** (k - 1 - j)))
    return tc.add(acc, frames[-1])


def _check_group(T: int, K: int) -> None:
    if K < 1:
        raise GroupSizeError("group size must be >= 1")
    if T % K:
        raise GroupSizeError(f"group size {K} does not divide T={T}")


def _spatial(conv: Conv, x: Tensor, counter, post) -> Tensor:
    y = conv(x, counter)
    return post(y) if post is not None else y


def baseline_forward(train: SpikeTrain, conv: Conv, params: LIFParams, counter: CallCounter | None = None,
                     post=None, trace: list | None = None) -> SpikeTrain:
    """One convolution and one LIF step per timestep."""
    out, state = [], None
    for frame in train.frames:
        y = _spatial(conv, frame, counter, post)
        state = state or LIFState.zeros(y.shape)
        s, state = lif_step(state, y, params)
        out.append(s)
        if trace is not None:
            trace.append(state.v)
    return SpikeTrain(out)


def tac_forward(train: SpikeTrain, conv: Conv, params: LIFParams, K: int, counter: CallCounter | None = None,
                post=None, trace: list | None = None) -> SpikeTrain:
    """Temporal collapse: one convolution and one LIF step per group of K frames."""
    _check_group(train.T, K)
    out, state = [], None
    for k in range(train.T // K):
        a = aggregate(train.frames[k * K:(k + 1) * K], params.beta)
        y = _spatial(conv, a, counter, post)
        state = state or LIFState.zeros(y.shape)
        s, state = lif_step(state, y, params, decay_power=K)
        out.append(s)
        if trace is not None:
            trace.append(state.v)
    return SpikeTrain(out)


def tac_tp_forward(train: SpikeTrain, conv: Conv, params: LIFParams, K: int, counter: CallCounter | None = None,
                   post=None, trace: list | None = None) -> SpikeTrain:
    """Temporal preservation: one convolution per group, shared by K LIF steps."""
    _check_group(train.T, K)
    out, state = [], None
    for k in range(train.T // K):
        a = aggregate(train.frames[k * K:(k + 1) * K], params.beta)
        y = _spatial(conv, a, counter, post)
        state = state or LIFState.zeros(y.shape)
        for _ in range(K):
            s, state = lif_step(state, y, params)
            out.append(s)
            if trace is not None:
                trace.append(state.v)
    return SpikeTrain(out)


def tcc_forward(train: SpikeTrain, conv: Conv, params: LIFParams, counter: CallCounter | None = None,
                post=None, trace: list | None = None) -> SpikeTrain:
    """Baseline forward that skips the convolution on all-zero frames.

    The membrane still decays (and may fire) on skipped frames; spikes are
    identical to :func:`baseline_forward`.
    """
    if not train.binary:
        raise ValueError("silent-frame skipping needs a binary spike train")
    out, state = [], None
    for frame in train.frames:
        y = conv(frame, counter) if frame.data.any() else conv.silent(frame)
        if post is not None:
            y = post(y)
        state = state or LIFState.zeros(y.shape)
        s, state = lif_step(state, y, params)
        out.append(s)
        if trace is not None:
            trace.append(state.v)
    return SpikeTrain(out)


def ftc_forward(train: SpikeTrain, conv: Conv, filt: BiquadFilter, v_th: float = 1.0,
                surrogate: SurrogateSpec = SurrogateSpec(), counter: CallCounter | None = None,
                post=None, reset: str = "subtract", trace: list | None = None) -> SpikeTrain:
    """Biquad-filtered membrane (transposed direct form II) with threshold and reset.

    The reset is applied to the filter output before it feeds back into the
    two state registers, so the first-order case reproduces LIF exactly.
    """
    b0, b1, b2, a1, a2 = filt.coefficients()
    out, s1, s2 = [], None, None
    for frame in train.frames:
        x = _spatial(conv, frame, counter, post)
        if s1 is None:
            s1 = s2 = Tensor(np.zeros(x.shape))
        y = tc.add(tc.mul(b0, x), s1)
        s = spike(tc.add_scalar(y, -v_th), surrogate)
        r = tc.detach(s) if reset == "subtract_detached" else s
        y = tc.sub(y, tc.scale(r, v_th))
        s1 = tc.add(tc.sub(tc.mul(b1, x), tc.mul(a1, y)), s2)
        s2 = tc.sub(tc.mul(b2, x), tc.mul(a2, y))
        out.append(s)
        if trace is not None:
            trace.append(y)
    return SpikeTrain(out)


def binary_entropy(p) -> np.ndarray:
    """H_b(p) in bits with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return np.where((p <= 0) | (p >= 1), 0.0, h)


def channel_capacity(rate) -> np.ndarray:
    """Binary symmetric channel capacity ``1 - H_b(rate)`` in bits."""
    return 1.0 - binary_entropy(rate)


def channel_gate_mask(rates, info_target_bits: float) -> np.ndarray:
    """Keep the fewest highest-capacity channels whose capacities sum to the target.

    Returns a boolean mask, True for channels that stay open. Ties in
    capacity are broken by channel index.
    """
    caps = channel_capacity(rates)
    if caps.sum() < info_target_bits:
        raise GateError(f"total capacity {caps.sum():.4f} bits is below the target "
                        f"{info_target_bits} bits; every channel would be gated")
    order = np.argsort(-caps, kind="stable")
    n_keep = int(np.searchsorted(np.cumsum(caps[order]), info_target_bits, side="left")) + 1
    mask = np.zeros(len(caps), dtype=bool)
    mask[order[:n_keep]] = True
    return mask


def measure_channel_rates(train: SpikeTrain) -> np.ndarray:
    """Per-channel firing rate over time, batch and space."""
    arr = train.array()
    return arr.mean(axis=(0, 1, 3, 4))


def imc_gate(train: SpikeTrain, spec: ChannelGateSpec) -> SpikeTrain:
    """Zero out low-capacity channels.

    Uses ``spec.measured_rates`` when provided, otherwise measures them on
    ``train``. The computed mask is written back to ``spec.gate_mask``.
    """
    rates = spec.measured_rates if spec.measured_rates is not None else measure_channel_rates(train)
    mask = channel_gate_mask(rates, spec.info_target_bits)
    spec.measured_rates, spec.gate_mask = np.asarray(rates), mask
    m = Tensor(mask.astype(np.float64).reshape(1, -1, 1, 1))
    return SpikeTrain([tc.mul(f, m) for f in train.frames], binary=train.binary)


# --- accounting --------------------------------------------------------------

def temporal_resolution(layers: Sequence[TemporalOpConfig], T: int) -> int:
    """Output timestep count after a stack of layers.

    Collapsing layers divide the running extent by their group size; every
    other kind preserves it.
    """
    extent = T
    for i, cfg in enumerate(layers):
        if not cfg.collapses:
            continue
        if extent % cfg.group_size:
            ratio = Fraction(extent, cfg.group_size)
            if ratio < 1:
                raise TemporalResolutionError(
                    f"layer {i}: {T}/{_product(layers[:i + 1])} = {float(Fraction(T, _product(layers[:i + 1]))):g} "
                    f"leaves less than one output timestep")
            raise TemporalResolutionError(
                f"layer {i}: group size {cfg.group_size} does not divide incoming extent {extent}")
        extent //= cfg.group_size
    return extent


def _product(layers) -> int:
    return math.prod(c.group_size for c in layers if c.collapses)


def conv_call_count(layers: Sequence[TemporalOpConfig], T: int) -> int:
    """Convolution calls of one forward pass: sum over layers of T_l / K_l."""
    temporal_resolution(layers, T)
    total, extent = 0, T
    for cfg in layers:
        k = cfg.group_size if cfg.kind in GROUPED else 1
        total += extent // k
        if cfg.collapses:
            extent //= k
    return total


# --- error scaling -----------------------------------------------------------

@dataclass
class ErrorScalingReport:
    k_values: list[int]
    rhos: list[float]
    beta: float
    n_trials: int
    weight_frobenius_sq: float
    mean_error: dict[tuple[int, float], float]
    sem_error: dict[tuple[int, float], float]
    slope_k: dict[float, float]
    slope_variance: dict[int, float]

    def fitted_constant(self, rho: float, k_ref: int | None = None) -> float:
        """C such that the bound ``C rho(1-rho) K ||W||_F^2`` is tight at ``k_ref``."""
        k_ref = k_ref if k_ref is not None else min(self.k_values)
        denom = rho * (1 - rho) * k_ref * self.weight_frobenius_sq
        return self.mean_error[(k_ref, rho)] / denom if denom else 0.0

    def bound(self, k: int, rho: float, c: float) -> float:
        return c * rho * (1 - rho) * k * self.weight_frobenius_sq

    def rows(self) -> list[dict]:
        return [{"k": k, "rho": rho, "mean_error": self.mean_error[(k, rho)],
                 "sem_error": self.sem_error[(k, rho)]}
                for rho in self.rhos for k in self.k_values]


def error_probe(T: int = 16, k_values: Sequence[int] = (2, 4, 8), rhos: Sequence[float] = (0.1,),
                beta: float = 0.9, conv_spec: ConvSpec = ConvSpec(4, 8, 3, 1, 1), n_trials: int = 100,
                v_th: float = 1.0, spatial: int = 8, batch: int = 1, seed: int = 0,
                weight_scale: float = 1.0) -> ErrorScalingReport:
    """Membrane error of TAC against the exact per-step simulation.

    For every trial an i.i.d. Bernoulli(rho) train is drawn once and shared by
    all group sizes. The error of a trial is the squared membrane distance
    (summed over neurons, averaged over batch) averaged over the group
    boundaries t = kK, where both simulations have a membrane.
    """
    if n_trials < 30:
        raise ValueError("error_probe needs n_trials >= 30")
    k_values, rhos = [int(k) for k in k_values], [float(r) for r in rhos]
    for k in k_values:
        _check_group(T, k)
    rng = np.random.default_rng(seed)
    fan_in = conv_spec.in_channels * conv_spec.kernel_size ** 2
    weight = tc.kaiming_uniform(conv_spec.weight_shape, fan_in, rng)
    weight.data *= weight.data.dtype.type(weight_scale)
    weight.requires_grad = False
    conv = Conv(weight, conv_spec)
    params = LIFParams(beta=beta, v_th=v_th)
    shape = (T, batch, conv_spec.in_channels, spatial, spatial)

    errors: dict[tuple[int, float], list[float]] = {(k, r): [] for k in k_values for r in rhos}
    for rho in rhos:
        for _ in range(n_trials):
            train = SpikeTrain.from_array((rng.random(shape) < rho).astype(np.float32), binary=True)
            exact: list[Tensor] = []
            baseline_forward(train, conv, params, trace=exact)
            for k in k_values:
                approx: list[Tensor] = []
                tac_forward(train, conv, params, k, trace=approx)
                diffs = [exact[(g + 1) * k - 1].data.astype(np.float64) - approx[g].data
                         for g in range(T // k)]
                sq = [float((d ** 2).reshape(batch, -1).sum(axis=1).mean()) for d in diffs]
                errors[(k, rho)].append(float(np.mean(sq)))

    mean = {key: float(np.mean(v)) for key, v in errors.items()}
    sem = {key: float(np.std(v, ddof=1) / math.sqrt(len(v))) for key, v in errors.items()}
    slope_k = {r: _slope(k_values, [mean[(k, r)] for k in k_values]) for r in rhos}
    slope_var = {k: _slope([r * (1 - r) for r in rhos], [mean[(k, r)] for r in rhos]) for k in k_values}
    return ErrorScalingReport(k_values, rhos, beta, n_trials, float((weight.data.astype(np.float64) ** 2).sum()),
                              mean, sem, slope_k, slope_var)


def _slope(x, y) -> float:
    if len(x) < 2 or len(set(x)) < 2:
        return float("nan")
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])
