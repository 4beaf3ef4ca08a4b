import math

import numpy as np
import pytest

from tacsnn import tensor as tc
from tacsnn.neuron import LIFParams
from tacsnn.temporal import (
    BiquadFilter, CallCounter, ChannelGateSpec, Conv, GateError, GroupSizeError, SpikeTrain,
    TemporalOpConfig, TemporalResolutionError, aggregate, baseline_forward, binary_entropy,
    channel_capacity, channel_gate_mask, conv_call_count, error_probe, ftc_forward, imc_gate,
    tac_forward, tac_tp_forward, tcc_forward, temporal_resolution,
)
from tacsnn.tensor import ConvSpec, Tensor

from helpers import grad_of


def make_conv(rng, c_in=2, c_out=3, k=3, padding=1, bias=False):
    spec = ConvSpec(c_in, c_out, k, 1, padding)
    w = Tensor(rng.normal(scale=0.6, size=spec.weight_shape))
    b = Tensor(rng.normal(scale=0.3, size=c_out)) if bias else None
    return Conv(w, spec, b)


def random_train(rng, T=8, shape=(2, 2, 6, 6), rho=0.3):
    return SpikeTrain.from_array((rng.random((T, *shape)) < rho).astype(np.float32))


def scalar_h_b(p):
    if p in (0.0, 1.0):
        return 0.0
    return -(p * math.log(p, 2) + (1 - p) * math.log(1 - p, 2))


# --- aggregate ----------------------------------------------------------------------

def test_aggregate_identity():
    s = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    assert aggregate([s], 0.5) is s


def test_aggregate_unit_decay_sums():
    a, b = Tensor(np.ones((1, 1, 2, 2))), Tensor(2 * np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(aggregate([a, b], 1.0).numpy(), 3 * np.ones((1, 1, 2, 2)))


def test_aggregate_weights_oldest_least():
    frames = [Tensor(np.full((1, 1, 1, 1), float(10 ** j))) for j in range(3)]
    assert aggregate(frames[:2], 0.5).item() == 0.5 * 1 + 10
    assert aggregate(frames, 0.5).item() == pytest.approx(0.25 * 1 + 0.5 * 10 + 100)


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([], 0.9)


# --- TAC / TAC-TP ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(50))
def test_tac_k1_bit_identical(seed):
    rng = np.random.default_rng(seed)
    conv, train = make_conv(rng, bias=seed % 2 == 0), random_train(rng, rho=rng.uniform(0.05, 0.9))
    params = LIFParams(beta=float(rng.uniform(0.3, 0.95)))
    ref = baseline_forward(train, conv, params).array()
    np.testing.assert_array_equal(tac_forward(train, conv, params, 1).array(), ref)
    np.testing.assert_array_equal(tac_tp_forward(train, conv, params, 1).array(), ref)


def test_tac_full_collapse():
    rng = np.random.default_rng(0)
    counter = CallCounter()
    out = tac_forward(random_train(rng, T=8), make_conv(rng), LIFParams(), 8, counter)
    assert out.T == 1 and counter.conv_calls == 1


@pytest.mark.parametrize("fwd", [tac_forward, tac_tp_forward])
def test_group_must_divide(fwd):
    rng = np.random.default_rng(0)
    with pytest.raises(GroupSizeError):
        fwd(random_train(rng, T=8), make_conv(rng), LIFParams(), 3)


@pytest.mark.parametrize("K", [1, 2, 4, 8])
def test_tac_tp_preserves_extent(K):
    rng = np.random.default_rng(K)
    counter = CallCounter()
    out = tac_tp_forward(random_train(rng, T=8), make_conv(rng), LIFParams(), K, counter)
    assert out.T == 8 and counter.conv_calls == 8 // K


def test_first_layer_exact_without_spikes():
    """Continuous input and no firing: TAC's membrane at group ends equals the per-step membrane."""
    rng = np.random.default_rng(1)
    with tc.precision(np.float64):
        train = SpikeTrain.from_array(rng.normal(size=(8, 2, 2, 5, 5)), binary=False)
        conv = make_conv(rng)
        params = LIFParams(beta=0.8, v_th=1e6)
        exact, approx = [], []
        baseline_forward(train, conv, params, trace=exact)
        tac_forward(train, conv, params, 4, trace=approx)
    for g, v in enumerate(approx):
        np.testing.assert_allclose(v.numpy(), exact[4 * g + 3].numpy(), atol=1e-5)


def _stack(kind, K, T, n_layers=5, seed=0):
    rng = np.random.default_rng(seed)
    conv = make_conv(rng, c_in=2, c_out=2)
    train = random_train(rng, T=T, shape=(1, 2, 6, 6))
    counter = CallCounter()
    params = LIFParams(v_th=0.5)
    for _ in range(n_layers):
        if kind == "tac":
            train = tac_forward(train, conv, params, K, counter)
        elif kind == "tac_tp":
            train = tac_tp_forward(train, conv, params, K, counter)
        else:
            train = baseline_forward(train, conv, params, counter)
    return train, counter


@pytest.mark.parametrize("kind,K,T,calls,extent", [
    ("baseline", 1, 16, 80, 16),
    ("tac_tp", 2, 16, 40, 16),
    ("tac_tp", 4, 16, 20, 16),
    ("tac_tp", 8, 16, 10, 16),
    ("tac", 2, 32, 31, 1),
])
def test_stacked_call_counts(kind, K, T, calls, extent):
    out, counter = _stack(kind, K, T)
    assert counter.conv_calls == calls and out.T == extent
    layers = [TemporalOpConfig(kind, K)] * 5
    assert conv_call_count(layers, T) == calls
    assert temporal_resolution(layers, T) == extent


def test_call_count_formula_random_configs():
    rng = np.random.default_rng(4)
    for _ in range(200):
        T = int(rng.choice([8, 16, 32, 64]))
        layers, extent, expected = [], T, 0
        for _ in range(rng.integers(1, 6)):
            kind = str(rng.choice(["baseline", "tac", "tac_tp", "tcc", "ftc", "imc"]))
            K = int(rng.choice([1, 2, 4])) if kind in ("tac", "tac_tp") else 1
            if kind in ("tac", "tac_tp") and extent % K:
                K = 1
            layers.append(TemporalOpConfig(kind, K))
            expected += extent // K
            if kind == "tac":
                extent //= K
        assert conv_call_count(layers, T) == expected


# --- temporal resolution ------------------------------------------------------------

@pytest.mark.parametrize("K", [1, 2, 4, 8, 16, 3])
def test_resolution_tac_tp_preserves(K):
    assert temporal_resolution([TemporalOpConfig("tac_tp", K)] * 5, 16) == 16


def test_resolution_full_collapse():
    assert temporal_resolution([TemporalOpConfig("tac", 2)] * 5, 32) == 1


def test_resolution_sub_unit_raises():
    with pytest.raises(TemporalResolutionError, match="16/32 = 0.5"):
        temporal_resolution([TemporalOpConfig("tac", 2)] * 5, 16)


def test_resolution_mixed():
    layers = [TemporalOpConfig("tac", 4), TemporalOpConfig("baseline"), TemporalOpConfig("tac", 2)]
    assert temporal_resolution(layers, 16) == 2


def test_group_size_only_for_grouped_kinds():
    with pytest.raises(ValueError):
        TemporalOpConfig("tcc", 2)
    with pytest.raises(ValueError):
        TemporalOpConfig("warp")


# --- TCC --------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_tcc_bit_identical(seed):
    rng = np.random.default_rng(seed)
    conv = make_conv(rng, bias=seed % 3 != 0)
    if seed == 0:
        train = SpikeTrain.from_array(np.zeros((8, 2, 2, 6, 6), np.float32))
    elif seed == 1:
        train = SpikeTrain.from_array(np.ones((8, 2, 2, 6, 6), np.float32))
    else:
        data = (rng.random((8, 2, 2, 6, 6)) < rng.uniform(0.001, 0.5)).astype(np.float32)
        data[rng.random(8) < 0.4] = 0.0  # whole silent frames
        train = SpikeTrain.from_array(data)
    params = LIFParams(v_th=0.5)
    c_ref, c_tcc = CallCounter(), CallCounter()
    ref = baseline_forward(train, conv, params, c_ref).array()
    out = tcc_forward(train, conv, params, c_tcc).array()
    np.testing.assert_array_equal(out, ref)
    assert c_tcc.conv_calls == sum(bool(f.data.any()) for f in train.frames)


def test_tcc_silent_and_dense_counts():
    rng = np.random.default_rng(0)
    conv = make_conv(rng)
    counter = CallCounter()
    out = tcc_forward(SpikeTrain.from_array(np.zeros((6, 1, 2, 4, 4), np.float32)), conv, LIFParams(), counter)
    assert counter.conv_calls == 0 and not out.array().any()
    counter = CallCounter()
    tcc_forward(SpikeTrain.from_array(np.ones((6, 1, 2, 4, 4), np.float32)), conv, LIFParams(), counter)
    assert counter.conv_calls == 6


def test_tcc_silent_probability_negligible():
    assert 0.9 ** (128 * 32 * 32) == 0.0


def test_tcc_rejects_continuous():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        tcc_forward(SpikeTrain.from_array(rng.normal(size=(2, 1, 2, 4, 4))), make_conv(rng), LIFParams())


# --- FTC --------------------------------------------------------------------------------

@pytest.mark.parametrize("beta", [0.5, 0.9])
def test_ftc_first_order_is_lif(beta):
    rng = np.random.default_rng(2)
    with tc.precision(np.float64):
        train = random_train(rng, T=12)
        conv = make_conv(rng)
        filt = BiquadFilter.from_coefficients(1.0, 0.0, 0.0, -beta, 0.0)
        ref_v, ftc_v = [], []
        ref_s = baseline_forward(train, conv, LIFParams(beta=beta), trace=ref_v).array()
        out_s = ftc_forward(train, conv, filt, 1.0, trace=ftc_v).array()
    np.testing.assert_array_equal(out_s, ref_s)
    for a, b in zip(ftc_v, ref_v):
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)


def _impulse_membrane(filt, n):
    frames = np.zeros((n, 1, 1, 1, 1))
    frames[0] = 1.0
    conv = Conv(Tensor(np.ones((1, 1, 1, 1))), ConvSpec(1, 1, 1, 1, 0))
    trace = []
    with tc.precision(np.float64):
        ftc_forward(SpikeTrain.from_array(frames, binary=False), conv, filt, v_th=1e9, trace=trace)
    return np.array([t.item() for t in trace])


def test_ftc_impulse_decays_at_radius():
    filt = BiquadFilter.create((1.0, 0.5, -0.3), r_raw=0.0, theta=1.1)
    assert filt.radius == 0.5
    h = _impulse_membrane(filt, 40)
    np.testing.assert_allclose(h, filt.impulse_response(40), atol=1e-12)
    n = np.arange(40)
    assert (np.abs(h[5:]) <= 10 * 0.5 ** n[5:]).all()


def test_ftc_random_filters_stable():
    rng = np.random.default_rng(9)
    for _ in range(100):
        filt = BiquadFilter.create(rng.uniform(-1, 1, 3), r_raw=rng.uniform(-5, 5), theta=rng.uniform(0, math.pi))
        _, _, _, a1, a2 = (t.item() for t in filt.coefficients())
        assert np.abs(np.roots([1.0, a1, a2])).max() < 1.0
        if filt.radius <= 0.9:
            assert abs(filt.impulse_response(200)[-1]) < 1e-6


def test_ftc_unstable_coefficients_rejected():
    with pytest.raises(ValueError):
        BiquadFilter.from_coefficients(1, 0, 0, -1.0, 0.0)
    with pytest.raises(ValueError):
        BiquadFilter.create(theta=4.0)


def test_ftc_filter_gradients():
    """Finite differences over the five filter parameters at random operating points."""
    rng = np.random.default_rng(11)
    probes = 0
    with tc.precision(np.float64):
        conv = make_conv(rng)
        conv.weight.requires_grad = False
        for _ in range(7):
            train = random_train(rng, T=6, shape=(1, 2, 4, 4))
            filt = BiquadFilter.create(rng.uniform(-1, 1, 3), r_raw=rng.uniform(-2, 2), theta=rng.uniform(0.2, 3.0))
            c = rng.normal(size=(6, 1, 3, 4, 4))

            def loss():
                trace = []
                ftc_forward(train, conv, filt, v_th=1e6, reset="subtract_detached", trace=trace)
                return tc.sum(tc.mul(tc.stack(trace), Tensor(c)))

            grads = grad_of(loss, filt.parameters())
            for p, g in zip(filt.parameters(), grads):
                old = p.data.copy()
                p.data = old + 1e-6
                up = loss().item()
                p.data = old - 1e-6
                down = loss().item()
                p.data = old
                numeric = (up - down) / 2e-6
                assert abs(g.item() - numeric) <= 1e-2 * max(abs(numeric), 1e-3)
                probes += 1
    assert probes >= 32


# --- IMC ----------------------------------------------------------------------------------

def test_capacities():
    np.testing.assert_allclose(channel_capacity([0.1, 0.3, 0.5]), [0.531, 0.119, 0.0], atol=1e-3)
    np.testing.assert_allclose(channel_capacity([0.0, 0.1, 0.5]), [1.0, 0.531, 0.0], atol=1e-3)
    for p in np.linspace(0, 1, 101):
        assert binary_entropy(p) == pytest.approx(scalar_h_b(float(p)), abs=1e-12)


def test_gate_order_and_extremes():
    mask = channel_gate_mask([0.5, 0.0, 1.0, 0.3], 2.0)
    assert mask.tolist() == [False, True, True, False]
    mask = channel_gate_mask([0.5, 0.1, 0.3], 0.6)
    assert mask.tolist() == [False, True, True]


def test_gate_min_width_inequality():
    rng = np.random.default_rng(0)
    for _ in range(500):
        rates = rng.uniform(0, 1, rng.integers(2, 64))
        if channel_capacity(rates).sum() < 0.02:
            continue
        target = float(rng.uniform(0.01, channel_capacity(rates).sum()))
        mask = channel_gate_mask(rates, target)
        caps = channel_capacity(rates)
        assert mask.sum() >= math.ceil(target / caps.max() - 1e-12)
        assert caps[mask].sum() >= target
        assert caps[mask].min() >= caps[~mask].max(initial=0.0)


def test_gate_everything_errors():
    with pytest.raises(GateError):
        channel_gate_mask([0.5, 0.5], 0.1)


def test_imc_gate_zeroes_channels():
    rng = np.random.default_rng(3)
    data = np.zeros((4, 2, 3, 5, 5), np.float32)
    data[:, :, 0] = rng.random((4, 2, 5, 5)) < 0.5
    data[:, :, 1] = rng.random((4, 2, 5, 5)) < 0.02
    data[:, :, 2] = rng.random((4, 2, 5, 5)) < 0.1
    spec = ChannelGateSpec(info_target_bits=1.0)
    out = imc_gate(SpikeTrain.from_array(data), spec).array()
    assert spec.gate_mask.tolist() == [False, True, True]
    assert not out[:, :, 0].any()
    np.testing.assert_array_equal(out[:, :, 1:], data[:, :, 1:])


# --- variance and error scaling ------------------------------------------------------------

@pytest.mark.parametrize("K", [1, 4, 8])
def test_variance_reduction(K):
    rho, n = 0.1, 100_000
    rng = np.random.default_rng(K)
    means = (rng.random((n, K)) < rho).mean(axis=1)
    dev = (means - means.mean()) ** 2
    se = dev.std(ddof=1) / math.sqrt(n)
    assert abs(dev.mean() - rho * (1 - rho) / K) <= 3 * se


def test_error_probe_degenerate_cases():
    rep = error_probe(T=8, k_values=(1, 2), rhos=(0.0, 0.3), n_trials=30, spatial=4)
    assert rep.mean_error[(1, 0.3)] == 0.0
    assert rep.mean_error[(1, 0.0)] == 0.0 and rep.mean_error[(2, 0.0)] == 0.0
    assert rep.mean_error[(2, 0.3)] > 0.0


def test_error_probe_validation():
    with pytest.raises(ValueError):
        error_probe(n_trials=10)
    with pytest.raises(GroupSizeError):
        error_probe(T=16, k_values=(3,))
