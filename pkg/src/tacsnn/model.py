"""Convolutional SNNs built from the temporal operators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .neuron import LIFParams, LIFState, SurrogateSpec, lif_step
from .temporal import (BiquadFilter, CallCounter, ChannelGateSpec, Conv, SpikeTrain, TemporalOpConfig,
                       baseline_forward, conv_call_count, ftc_forward, imc_gate, tac_forward, tac_tp_forward,
                       tcc_forward, temporal_resolution)
from .tensor import BatchNormState, ConvSpec, Tensor

ARCHITECTURES = ("mnist_small", "event_small")
READOUTS = ("spike_count", "voting")


@dataclass
class ModelConfig:
    architecture: str = "mnist_small"
    in_channels: int = 1
    input_size: int = 14
    timesteps: int = 16
    widths: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    padding: int = 0
    pool: int = 2
    hidden: tuple[int, ...] = (128,)
    classes: int = 10
    voters: int = 1
    readout: str = "spike_count"
    layers: list[TemporalOpConfig] = field(default_factory=list)
    neuron: LIFParams = LIFParams()
    imc_info_bits: float = 4.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if not self.layers:
            self.layers = [TemporalOpConfig() for _ in self.widths]
        if len(self.layers) != len(self.widths):
            raise ValueError(f"{len(self.layers)} temporal op configs for {len(self.widths)} conv layers")

    @classmethod
    def preset(cls, architecture: str, kind: str = "baseline", k: int = 1, **overrides) -> "ModelConfig":
        """Desk-scale variants of the two reference architectures."""
        if architecture == "mnist_small":
            base = dict(architecture=architecture, in_channels=1, input_size=14, timesteps=16, widths=(8, 16),
                        padding=0, hidden=(128,), classes=10, voters=1, readout="spike_count",
                        neuron=LIFParams(beta=0.9, v_th=1.0, surrogate=SurrogateSpec("fast_sigmoid", 2.0),
                                         reset="subtract_detached"))
        elif architecture == "event_small":
            base = dict(architecture=architecture, in_channels=2, input_size=32, timesteps=16, widths=(8, 16, 16),
                        padding=1, hidden=(), classes=4, voters=10, readout="voting",
                        neuron=LIFParams(beta=0.5, v_th=1.0, surrogate=SurrogateSpec("arctan", 2.0),
                                         reset="subtract_detached"))
        else:
            raise ValueError(f"unknown architecture {architecture!r}")
        base.update(overrides)
        if "layers" not in overrides:
            gk = k if kind in ("tac", "tac_tp") else 1
            base["layers"] = [TemporalOpConfig(kind, gk) for _ in base["widths"]]
        return cls(**base)

    def output_timesteps(self) -> int:
        return temporal_resolution(self.layers, self.timesteps)

    def predicted_conv_calls(self) -> int:
        return conv_call_count(self.layers, self.timesteps)


class ConvBlock:
    """conv -> batchnorm -> temporal neuron op -> max pool."""

    def __init__(self, spec: ConvSpec, op: TemporalOpConfig, neuron: LIFParams, pool: int,
                 rng: np.random.Generator, imc_bits: float):
        fan_in = spec.in_channels * spec.kernel_size ** 2
        self.conv = Conv(tc.kaiming_uniform(spec.weight_shape, fan_in, rng, name="conv.weight"), spec)
        self.bn = BatchNormState.create(spec.out_channels)
        self.op, self.neuron, self.pool = op, neuron, pool
        self.filter = op.ftc_filter
        if op.kind == "ftc" and self.filter is None:
            # starts as a damped resonator close to the LIF decay
            self.filter = BiquadFilter.create((1.0, 0.0, 0.0), r_raw=float(np.log(neuron.beta / (1 - neuron.beta))),
                                              theta=0.1)
        self.gate = op.imc_gate if op.imc_gate is not None else ChannelGateSpec(imc_bits)

    def parameters(self) -> list[Tensor]:
        ps = [self.conv.weight, self.bn.gamma, self.bn.beta]
        if self.op.kind == "ftc":
            ps += self.filter.parameters()
        return ps

    def __call__(self, train: SpikeTrain, counter: CallCounter | None, mode: str) -> SpikeTrain:
        def post(y):
            return tc.batchnorm(y, self.bn, mode)

        kind, p = self.op.kind, self.neuron
        if kind == "baseline":
            out = baseline_forward(train, self.conv, p, counter, post)
        elif kind == "tac":
            out = tac_forward(train, self.conv, p, self.op.group_size, counter, post)
        elif kind == "tac_tp":
            out = tac_tp_forward(train, self.conv, p, self.op.group_size, counter, post)
        elif kind == "tcc":
            out = tcc_forward(train, self.conv, p, counter, post)
        elif kind == "ftc":
            out = ftc_forward(train, self.conv, self.filter, p.v_th, p.surrogate, counter, post, p.reset)
        else:
            gate = ChannelGateSpec(self.gate.info_target_bits)
            out = imc_gate(baseline_forward(train, self.conv, p, counter, post), gate)
            self.gate = gate
        if self.pool > 1:
            out = out.map(lambda f: tc.maxpool2d(f, self.pool))
        return out


class DenseLIF:
    def __init__(self, n_in: int, n_out: int, neuron: LIFParams, rng: np.random.Generator):
        self.weight = tc.kaiming_uniform((n_out, n_in), n_in, rng, name="fc.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name="fc.bias")
        self.neuron = neuron

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, train: SpikeTrain) -> SpikeTrain:
        out, state = [], None
        for f in train.frames:
            y = tc.linear(tc.reshape(f, (f.shape[0], -1)), self.weight, self.bias)
            state = state or LIFState.zeros(y.shape)
            s, state = lif_step(state, y, self.neuron)
            out.append(s)
        return SpikeTrain(out)


class SpikingConvNet:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.output_timesteps()  # validates the temporal cascade
        self.config = config
        rng = np.random.default_rng(seed)
        self.blocks: list[ConvBlock] = []
        c, size = config.in_channels, config.input_size
        for width, op in zip(config.widths, config.layers):
            spec = ConvSpec(c, width, config.kernel_size, 1, config.padding)
            size = spec.output_extent(size)
            if size % config.pool:
                raise ValueError(f"feature map {size} not divisible by pool {config.pool}")
            self.blocks.append(ConvBlock(spec, op, config.neuron, config.pool, rng, config.imc_info_bits))
            c, size = width, size // config.pool
        n_in = c * size * size
        self.dense: list[DenseLIF] = []
        for h in (*config.hidden, config.classes * config.voters):
            self.dense.append(DenseLIF(n_in, h, config.neuron, rng))
            n_in = h

    def parameters(self) -> list[Tensor]:
        return [p for layer in (*self.blocks, *self.dense) for p in layer.parameters()]

    def forward(self, train: SpikeTrain, counter: CallCounter | None = None, mode: str = "train") -> SpikeTrain:
        for block in self.blocks:
            train = block(train, counter, mode)
        for layer in self.dense:
            train = layer(train)
        return train

    def scores(self, out: SpikeTrain) -> Tensor:
        """Per-class readout [B, classes]: spike counts, or voter-averaged firing rates."""
        total = out.frames[0]
        for f in out.frames[1:]:
            total = tc.add(total, f)
        if self.config.readout == "spike_count":
            return total
        b = total.shape[0]
        grouped = tc.reshape(total, (b, self.config.classes, self.config.voters))
        return tc.scale(tc.mean(grouped, axis=2), 1.0 / out.T)

    def loss(self, out: SpikeTrain, labels: np.ndarray, kind: str | None = None) -> tuple[Tensor, np.ndarray]:
        """Training loss and predictions; ``kind`` defaults to the readout's usual loss."""
        scores = self.scores(out)
        if kind is None:
            kind = "ce_spike_count" if self.config.readout == "spike_count" else "mse_rate_onehot"
        if kind == "ce_spike_count":
            loss = tc.cross_entropy(scores, labels)
        else:
            loss = mse_rate_loss(out, labels, self.config.classes, self.config.voters)
        return loss, scores.data.argmax(axis=1)

    def predict(self, out: SpikeTrain) -> np.ndarray:
        return self.scores(out).data.argmax(axis=1)


def mse_rate_loss(out: SpikeTrain, labels, classes: int, voters: int = 1) -> Tensor:
    """MSE between voter-averaged firing rates and one-hot targets.

    ``out`` frames are [B, classes * voters], consecutive voters per class.
    """
    b, n = out.frame_shape
    if n != classes * voters:
        raise tc.ShapeError(f"output width {n} != classes {classes} x voters {voters}", "classes")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise tc.ShapeError(f"labels shape {labels.shape} != ({b},)", "labels")
    total = out.frames[0]
    for f in out.frames[1:]:
        total = tc.add(total, f)
    rates = tc.scale(tc.mean(tc.reshape(total, (b, classes, voters)), axis=2), 1.0 / out.T)
    target = np.zeros((b, classes))
    target[np.arange(b), labels] = 1.0
    return tc.mse(rates, target)
