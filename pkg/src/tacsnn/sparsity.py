"""Why unstructured spike sparsity does not pay off on SIMD hardware.

Closed forms and Monte-Carlo estimators for the statistics behind each
failed strategy, plus a gather-based convolution that is output-equivalent to
the dense one. Wall-clock timings are recorded but never asserted on.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .temporal import SpikeTrain
from .tensor import ConvSpec, Tensor


@dataclass(frozen=True)
class SimdModel:
    lane_width: int
    firing_rate: float

    def __post_init__(self):
        if self.lane_width < 1:
            raise ValueError("lane_width must be positive")
        if not 0.0 <= self.firing_rate <= 1.0:
            raise ValueError("firing_rate must lie in [0, 1]")


@dataclass
class SparsityReport:
    method: str
    statistic: str
    measured: float
    predicted: float
    samples: int
    standard_error: float
    agrees: bool
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def skip_fraction(model: SimdModel) -> float:
    """Probability that a whole SIMD vector of spikes is zero: (1 - rho)^W."""
    return (1.0 - model.firing_rate) ** model.lane_width


def max_speedup(model: SimdModel) -> float:
    """Upper bound 1 / (1 - f_skip) from skipping all-zero vectors for free."""
    f = skip_fraction(model)
    return math.inf if f >= 1.0 else 1.0 / (1.0 - f)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TACSNN_THREADS", "1")))
    except ValueError:
        return 1


def _sharded(fn, n: int, seed: int) -> int:
    """Sum ``fn(rng, count)`` over shards with spawned, order-fixed generators."""
    shards = _threads()
    counts = [n // shards + (i < n % shards) for i in range(shards)]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(shards)]
    if shards == 1:
        return fn(rngs[0], counts[0])
    with ThreadPoolExecutor(shards) as pool:
        return int(sum(pool.map(fn, rngs, counts)))


def skip_fraction_mc(model: SimdModel, n_vectors: int = 10**6, seed: int = 0, chunk: int = 1 << 16) -> float:
    """Fraction of sampled W-lane Bernoulli(rho) vectors that are entirely zero."""
    if n_vectors < 10**4:
        raise ValueError("n_vectors must be >= 1e4")
    w, rho = model.lane_width, model.firing_rate

    def count(rng, n):
        hits = 0
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            hits += int((~(rng.random((m, w)) < rho).any(axis=1)).sum())
        return hits

    return _sharded(count, n_vectors, seed) / n_vectors


def delta_density(train) -> float:
    """Fraction of nonzero entries in S_t - S_{t-1} over t >= 1."""
    arr = train.array() if isinstance(train, SpikeTrain) else np.asarray(train)
    if arr.shape[0] < 2:
        raise ValueError("delta density needs T >= 2")
    return float(np.count_nonzero(arr[1:] != arr[:-1]) / arr[1:].size)


@dataclass
class GatherStats:
    gathered: int
    dense: int

    @property
    def ratio(self) -> float:
        return self.gathered / self.dense if self.dense else 0.0


def gather_conv(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> tuple[Tensor, GatherStats]:
    """Scatter each nonzero input element's kernel contribution into the output.

    Same result as :func:`tacsnn.tensor.conv2d` up to summation order; the
    stats report how many input elements were gathered versus the dense count.
    """
    b, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    out = np.zeros((b, ho, wo, spec.out_channels), dtype=x.data.dtype)
    bi, ci, yi, xi = np.nonzero(x.data)
    vals = x.data[bi, ci, yi, xi]
    for di in range(k):
        for dj in range(k):
            ry, rx = yi + p - di, xi + p - dj
            ok = (ry >= 0) & (rx >= 0) & (ry % s == 0) & (rx % s == 0)
            oy, ox = ry // s, rx // s
            ok &= (oy < ho) & (ox < wo)
            contrib = vals[ok, None] * weight.data[:, ci[ok], di, dj].T
            np.add.at(out, (bi[ok], oy[ok], ox[ok]), contrib)
    if bias is not None:
        out += bias.data
    return Tensor(out.transpose(0, 3, 1, 2)), GatherStats(int(len(vals)), int(x.size))


def row_compressibility(rho: float, in_channels: int, kernel_size: int) -> float:
    """Probability that an im2col row of i.i.d. Bernoulli(rho) spikes is all zero."""
    return (1.0 - rho) ** (in_channels * kernel_size ** 2)


def row_compressibility_empirical(rho: float, in_channels: int, kernel_size: int, spatial: int = 32,
                                  batch: int = 8, seed: int = 0, padding: int = 0) -> tuple[float, int, float]:
    """Measured all-zero row fraction of the im2col matrix used by ``conv2d``.

    Returns (fraction, number of rows, standard error). Overlapping patches
    make rows of one sample correlated, so the standard error comes from the
    spread of per-sample fractions, which are independent.
    """
    rng = np.random.default_rng(seed)
    x = (rng.random((batch, in_channels, spatial, spatial)) < rho).astype(np.float32)
    cols = tc.im2col(x, kernel_size, 1, padding)
    per_sample = (~cols.any(axis=1)).reshape(batch, -1).mean(axis=1)
    se = float(per_sample.std(ddof=1) / math.sqrt(batch)) if batch > 1 else float("nan")
    return float(per_sample.mean()), cols.shape[0], se


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def _report(method, statistic, measured, predicted, n, seconds, se=None) -> SparsityReport:
    se = _binomial_se(predicted, n) if se is None else se
    agrees = abs(measured - predicted) <= 3 * se if se > 0 else measured == predicted
    return SparsityReport(method, statistic, float(measured), float(predicted), int(n), float(se), bool(agrees), seconds)


def run_lab(seed: int = 0, rho: float = 0.1, lane_width: int = 32, n_vectors: int = 10**6) -> list[SparsityReport]:
    """Every statistic of the sparsity study as one list of report rows."""
    rows = []
    model = SimdModel(lane_width, rho)

    t0 = time.perf_counter()
    mc = skip_fraction_mc(model, n_vectors, seed)
    rows.append(_report("simd_lane_skip", "skip_fraction", mc, skip_fraction(model), n_vectors,
                        time.perf_counter() - t0))
    rows.append(SparsityReport("simd_lane_skip", "max_speedup", max_speedup(model), max_speedup(model),
                               0, 0.0, True))

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    train = (rng.random((17, 4, 16, 32, 32)) < rho).astype(np.uint8)
    dd = delta_density(train)
    n = train[1:].size
    rows.append(_report("temporal_delta", "delta_density", dd, 2 * rho * (1 - rho), n, time.perf_counter() - t0))

    for cin in (2, 128):
        t0 = time.perf_counter()
        frac, n, se = row_compressibility_empirical(rho, cin, 3, spatial=34, batch=128 if cin == 2 else 4,
                                                    seed=seed + 2)
        rows.append(_report("sparse_gemm", f"row_compressibility_cin{cin}", frac, row_compressibility(rho, cin, 3),
                            n, time.perf_counter() - t0, se=max(se, _binomial_se(row_compressibility(rho, cin, 3), n))))

    spec = ConvSpec(2, 16, 3, 1, 1)
    x = Tensor((rng.random((4, 2, 32, 32)) < rho).astype(np.float32))
    w = tc.kaiming_uniform(spec.weight_shape, 18, rng)
    t0 = time.perf_counter()
    dense = tc.conv2d(x, w, None, spec)
    t_dense = time.perf_counter() - t0
    t0 = time.perf_counter()
    sparse, stats = gather_conv(x, w, spec)
    t_gather = time.perf_counter() - t0
    err = float(np.max(np.abs(dense.data - sparse.data)))
    rows.append(SparsityReport("weight_gather", "gathered_fraction", stats.ratio, rho, stats.dense,
                               _binomial_se(rho, stats.dense), abs(stats.ratio - rho) <= 3 * _binomial_se(rho, stats.dense),
                               t_gather))
    rows.append(SparsityReport("weight_gather", "max_abs_error_vs_dense", err, 0.0, 0, 1e-5, err <= 1e-5, t_dense))
    return rows
