"""Surrogate-gradient training loop, Adam, schedules and desk-scale datasets."""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as tc
from .encoding import downsample, load_idx, rate_encode, synth_gesture
from .model import SpikingConvNet
from .temporal import CallCounter, SpikeTrain
from .tensor import Tape, Tensor

SCHEDULES = ("cosine", "cosine_warm_restarts", "constant")
LOSSES = ("ce_spike_count", "mse_rate_onehot")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    schedule: str = "cosine"
    t_max: int | None = None
    loss: str = "ce_spike_count"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr:
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def learning_rate(base: float, schedule: str, progress: float, total: float, t_max: float | None = None) -> float:
    """Learning rate after ``progress`` of ``total`` epochs (fractional epochs allowed)."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1 + math.cos(math.pi * min(progress / total, 1.0)))
    period = t_max or total
    return base * 0.5 * (1 + math.cos(math.pi * ((progress % period) / period)))


# --- data --------------------------------------------------------------------

@dataclass
class Dataset:
    """Either static images (rate-coded per batch) or precomputed event frames."""

    kind: str  # "static" | "frames"
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    timesteps: int

    def batch(self, x: np.ndarray, rng: np.random.Generator) -> SpikeTrain:
        if self.kind == "static":
            return rate_encode(x, self.timesteps, rng=rng)
        frames = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
        return SpikeTrain([Tensor(f) for f in frames], binary=False)


def _mnist_files(data_dir: Path | None):
    names = [("train-images-idx3-ubyte", "train-labels-idx1-ubyte")]
    if data_dir is not None:
        for img, lab in names:
            for suffix in ("", ".gz"):
                pi, pl = data_dir / (img + suffix), data_dir / (lab + suffix)
                if pi.exists() and pl.exists():
                    return pi.read_bytes(), pl.read_bytes()
    pkg = resources.files("tacsnn") / "data"
    return ((pkg / "mnist5k-images-idx3-ubyte.gz").read_bytes(),
            (pkg / "mnist5k-labels-idx1-ubyte.gz").read_bytes())


def load_mnist(n_train: int = 2000, n_test: int = 1000, size: int = 14, timesteps: int = 16) -> Dataset:
    """MNIST digits scaled to ``size`` pixels.

    Reads IDX files from ``$TACSNN_DATA_DIR`` when present, otherwise the
    bundled 5000-digit subset. The first ``n_train`` digits train, the next
    ``n_test`` test.
    """
    env = os.environ.get("TACSNN_DATA_DIR")
    img_bytes, lab_bytes = _mnist_files(Path(env) if env else None)
    images, labels = load_idx(img_bytes).data, load_idx(lab_bytes)
    if n_train + n_test > len(labels):
        raise ValueError(f"requested {n_train + n_test} digits, only {len(labels)} available")
    factor = images.shape[-1] // size
    if factor * size != images.shape[-1]:
        raise ValueError(f"image size {images.shape[-1]} is not a multiple of {size}")
    images = downsample(images, factor)[:, None].astype(np.float32) if factor > 1 else images[:, None]
    return Dataset("static", images[:n_train], labels[:n_train], images[n_train:n_train + n_test],
                   labels[n_train:n_train + n_test], timesteps)


def load_synth_gesture(n_train: int = 256, n_test: int = 128, size: int = 32, timesteps: int = 16,
                       seed: int = 1234, **kwargs) -> Dataset:
    """Balanced synthetic motion dataset; sample i has class i % 4 and seed (seed, i)."""

    def make(n, offset):
        xs, ys = [], []
        for i in range(n):
            s = int(np.random.SeedSequence([seed, offset + i]).generate_state(1)[0])
            fs, label = synth_gesture(i % 4, timesteps, size, size, s, **kwargs)
            xs.append(fs.frames)
            ys.append(label)
        return np.stack(xs), np.asarray(ys)

    xtr, ytr = make(n_train, 0)
    xte, yte = make(n_test, 10**6)
    return Dataset("frames", xtr, ytr, xte, yte, timesteps)


# --- training ----------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class RunResult:
    seed: int
    epochs: list[EpochMetrics]
    conv_calls_total: int
    forward_passes: int
    predicted_conv_calls: int
    output_timesteps: int

    @property
    def best_acc(self) -> float:
        return max(e.test_acc for e in self.epochs)

    @property
    def final_acc(self) -> float:
        return self.epochs[-1].test_acc

    @property
    def conv_calls_per_forward(self) -> float:
        return self.conv_calls_total / self.forward_passes if self.forward_passes else 0.0

    @property
    def epoch_seconds(self) -> float:
        """Mean training-loop seconds per epoch, first (warm-up) epoch excluded when possible."""
        times = [e.seconds for e in self.epochs]
        return float(np.mean(times[1:] if len(times) > 1 else times))


def evaluate(model: SpikingConvNet, data: Dataset, x: np.ndarray, y: np.ndarray, batch_size: int,
             rng: np.random.Generator, counter: CallCounter | None = None) -> tuple[float, int]:
    correct, passes = 0, 0
    for start in range(0, len(y), batch_size):
        train = data.batch(x[start:start + batch_size], rng)
        out = model.forward(train, counter, "eval")
        correct += int((model.predict(out) == y[start:start + batch_size]).sum())
        passes += 1
    return 100.0 * correct / len(y), passes


def train(model: SpikingConvNet, data: Dataset, config: TrainConfig, seed: int = 0, log=None) -> RunResult:
    """Train with Adam; deterministic for a fixed seed.

    Only the forward/backward/update work is timed; batch encoding is not.
    """
    params = model.parameters()
    opt = Adam(params, config.learning_rate)
    counter = CallCounter()
    passes = 0
    n = len(data.y_train)
    steps = math.ceil(n / config.batch_size)
    history = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        enc = np.random.default_rng([seed, epoch, 1])
        busy, losses, correct = 0.0, [], 0
        lr = config.learning_rate
        for i in range(steps):
            idx = order[i * config.batch_size:(i + 1) * config.batch_size]
            batch, labels = data.batch(data.x_train[idx], enc), data.y_train[idx]
            lr = learning_rate(config.learning_rate, config.schedule, epoch + i / steps, config.epochs, config.t_max)
            t0 = time.perf_counter()
            tape = Tape()
            with tape.recording():
                out = model.forward(batch, counter, "train")
                loss, pred = model.loss(out, labels, config.loss)
            passes += 1
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {i}, lr={lr:g}")
            opt.zero_grad()
            tc.backward(tape, loss, params)
            opt.step(lr)
            busy += time.perf_counter() - t0
            losses.append(value)
            correct += int((pred == labels).sum())
        acc, p = evaluate(model, data, data.x_test, data.y_test, max(config.batch_size, 100),
                          np.random.default_rng([seed, 10**6]), counter)
        passes += p
        m = EpochMetrics(epoch, lr, float(np.mean(losses)), 100.0 * correct / n, acc, busy)
        history.append(m)
        if log is not None:
            log(m)
    return RunResult(seed, history, counter.conv_calls, passes, model.config.predicted_conv_calls(),
                     model.config.output_timesteps())
