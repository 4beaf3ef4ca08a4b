import math

import numpy as np
import pytest

from tacsnn import tensor as tc
from tacsnn.model import ModelConfig, SpikingConvNet, mse_rate_loss
from tacsnn.neuron import LIFParams, SurrogateSpec
from tacsnn.temporal import CallCounter, SpikeTrain, TemporalOpConfig, TemporalResolutionError
from tacsnn.tensor import ShapeError, Tape, Tensor
from tacsnn.train import (
    Adam, TrainConfig, TrainingDiverged, evaluate, learning_rate, load_mnist, load_synth_gesture, train,
)

from helpers import grad_of


@pytest.fixture(scope="module")
def tiny_mnist():
    return load_mnist(n_train=64, n_test=64)


def mnist_model(kind="baseline", k=1, seed=0, **kw):
    return SpikingConvNet(ModelConfig.preset("mnist_small", kind, k, **kw), seed)


# --- optimizer and schedules --------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    with tc.precision(np.float64):
        p = Tensor(rng.normal(size=5), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(5)
    opt = Adam([p], lr=0.01)
    for t in range(1, 11):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_schedules():
    assert learning_rate(1.0, "constant", 3, 10) == 1.0
    assert learning_rate(1.0, "cosine", 0, 10) == 1.0
    assert learning_rate(1.0, "cosine", 5, 10) == pytest.approx(0.5)
    assert learning_rate(1.0, "cosine", 10, 10) == pytest.approx(0.0)
    assert learning_rate(1.0, "cosine_warm_restarts", 4, 10, t_max=4) == 1.0
    assert learning_rate(1.0, "cosine_warm_restarts", 6, 10, t_max=4) == pytest.approx(0.5)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(batch_size=0), dict(schedule="step"),
                                    dict(loss="hinge"), dict(epochs=0)])
def test_train_config_validated(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# --- losses -----------------------------------------------------------------------

def _train_of(arr):
    return SpikeTrain([Tensor(a) for a in np.asarray(arr, dtype=np.float64)])


def test_mse_perfect_rates():
    out = _train_of(np.tile(np.array([[0, 1, 0], [1, 0, 0]]), (4, 1, 1)))
    assert mse_rate_loss(out, [1, 0], 3).item() == 0.0


def test_mse_silent_output():
    out = _train_of(np.zeros((4, 2, 5)))
    assert mse_rate_loss(out, [1, 3], 5).item() == pytest.approx(1 / 5)


def test_mse_hand_toy():
    # T=2, B=1, 2 classes; rates (0.5, 1.0) against target class 0
    out = _train_of([[[1, 1]], [[0, 1]]])
    assert mse_rate_loss(out, [0], 2).item() == pytest.approx(((0.5 - 1) ** 2 + (1.0 - 0) ** 2) / 2)


def test_mse_voters_average():
    # 2 classes x 2 voters; class-0 voters fire 1 and 0, class-1 voters silent
    out = _train_of([[[1, 0, 0, 0]]])
    assert mse_rate_loss(out, [0], 2, voters=2).item() == pytest.approx(((0.5 - 1) ** 2 + 0) / 2)


def test_mse_shape_errors():
    with pytest.raises(ShapeError):
        mse_rate_loss(_train_of(np.zeros((2, 1, 5))), [0], 2, voters=2)
    with pytest.raises(ShapeError):
        mse_rate_loss(_train_of(np.zeros((2, 2, 4))), [0], 2, voters=2)


# --- model accounting ---------------------------------------------------------------

@pytest.mark.parametrize("kind,k,calls,t_out", [("baseline", 1, 32, 16), ("tac", 4, 5, 1), ("tac_tp", 4, 8, 16)])
def test_mnist_call_counts(kind, k, calls, t_out):
    cfg = ModelConfig.preset("mnist_small", kind, k)
    assert cfg.predicted_conv_calls() == calls and cfg.output_timesteps() == t_out
    model = SpikingConvNet(cfg, 0)
    counter = CallCounter()
    out = model.forward(SpikeTrain.from_array(np.zeros((16, 2, 1, 14, 14), np.float32)), counter)
    assert counter.conv_calls == calls and out.T == t_out


def test_build_rejects_sub_unit_resolution():
    cfg = ModelConfig.preset("event_small", "tac", 8)
    with pytest.raises(TemporalResolutionError):
        SpikingConvNet(cfg)


def test_initialization():
    model = mnist_model()
    w = model.blocks[0].conv.weight.data
    assert np.abs(w).max() <= 1 / math.sqrt(9)
    assert (model.blocks[0].bn.gamma.data == 1).all() and not model.blocks[0].bn.beta.data.any()
    assert not model.dense[0].bias.data.any()


# --- training behaviour ---------------------------------------------------------------

def test_lr_zero_keeps_parameters(tiny_mnist):
    model = mnist_model()
    before = [p.data.copy() for p in model.parameters()]
    result = train(model, tiny_mnist, TrainConfig(epochs=1, learning_rate=0.0), seed=0)
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)
    # with identical weights and normalization statistics, accuracy is the initial model's accuracy
    fresh = mnist_model()
    for blk, src in zip(fresh.blocks, model.blocks):
        blk.bn.running_mean[...] = src.bn.running_mean
        blk.bn.running_var[...] = src.bn.running_var
    acc, _ = evaluate(fresh, tiny_mnist, tiny_mnist.x_test, tiny_mnist.y_test, 100, np.random.default_rng([0, 10**6]))
    assert acc == result.final_acc


def test_single_sample_overfit(tiny_mnist):
    model = mnist_model(seed=1)
    params = model.parameters()
    opt = Adam(params, 5e-3)
    x, y = tiny_mnist.x_train[:1], tiny_mnist.y_train[:1]
    rng = np.random.default_rng(0)
    hits = []
    for _ in range(50):
        tape = Tape()
        with tape.recording():
            loss, pred = model.loss(model.forward(tiny_mnist.batch(x, rng)), y)
        opt.zero_grad()
        tc.backward(tape, loss, params)
        opt.step()
        hits.append(int(pred[0] == y[0]))
    assert sum(hits[-10:]) == 10


def test_seed_determinism(tiny_mnist):
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=5e-3)
    traces = {}
    for seed in (0, 1, 2):
        r = train(mnist_model(seed=seed), tiny_mnist, cfg, seed=seed)
        traces[seed] = [(e.train_loss, e.train_acc, e.test_acc) for e in r.epochs]
    again = train(mnist_model(seed=0), tiny_mnist, cfg, seed=0)
    assert [(e.train_loss, e.train_acc, e.test_acc) for e in again.epochs] == traces[0]
    assert len({tuple(t) for t in traces.values()}) == 3


def test_gradient_reaches_every_conv_layer():
    data = load_synth_gesture(n_train=8, n_test=4)
    for kind, k in (("baseline", 1), ("tac", 2), ("tac_tp", 2)):
        model = SpikingConvNet(ModelConfig.preset("event_small", kind, k), 0)
        assert model.config.neuron.surrogate.kind == "arctan"
        batch = data.batch(data.x_train, None)
        assert batch.array().any()
        convs = [b.conv.weight for b in model.blocks]
        grads = grad_of(lambda: model.loss(model.forward(batch), data.y_train)[0], convs)
        assert all(np.abs(g).sum() > 0 for g in grads), kind


def test_nan_loss_aborts(tiny_mnist, monkeypatch):
    model = mnist_model()

    def bad_loss(out, labels, kind=None):
        return tc.scale(tc.sum(out.frames[0]), math.nan), np.zeros(len(labels), int)

    monkeypatch.setattr(model, "loss", bad_loss)
    with pytest.raises(TrainingDiverged, match=r"epoch 0, batch 0, lr=0\.005"):
        train(model, tiny_mnist, TrainConfig(epochs=1, learning_rate=5e-3), seed=0)


@pytest.mark.parametrize("kind,k", [("baseline", 1), ("tac", 4), ("tac_tp", 2)])
def test_trained_call_totals_match_formula(tiny_mnist, kind, k):
    r = train(mnist_model(kind, k), tiny_mnist, TrainConfig(epochs=1, batch_size=32), seed=0)
    assert r.conv_calls_per_forward == r.predicted_conv_calls
    assert r.conv_calls_total == r.forward_passes * r.predicted_conv_calls


def test_mixed_layers_and_other_operators(tiny_mnist):
    layers = [TemporalOpConfig("tcc"), TemporalOpConfig("ftc")]
    model = mnist_model(layers=layers)
    r = train(model, tiny_mnist, TrainConfig(epochs=1, batch_size=32), seed=0)
    assert r.output_timesteps == 16 and math.isfinite(r.epochs[0].train_loss)
    imc = mnist_model(layers=[TemporalOpConfig("baseline"), TemporalOpConfig("imc")], imc_info_bits=0.5)
    out = imc.forward(tiny_mnist.batch(tiny_mnist.x_train[:4], np.random.default_rng(0)))
    assert out.T == 16 and imc.blocks[1].gate.gate_mask is not None


def test_data_loaders():
    d = load_mnist(n_train=10, n_test=5, size=14, timesteps=4)
    assert d.x_train.shape == (10, 1, 14, 14) and d.x_test.shape == (5, 1, 14, 14)
    assert 0.0 <= d.x_train.min() and d.x_train.max() <= 1.0
    assert d.batch(d.x_train[:3], np.random.default_rng(0)).array().shape == (4, 3, 1, 14, 14)
    g = load_synth_gesture(n_train=8, n_test=4, timesteps=8)
    assert g.x_train.shape == (8, 8, 2, 32, 32) and g.y_train.tolist() == [0, 1, 2, 3] * 2
    np.testing.assert_array_equal(load_synth_gesture(n_train=8, n_test=4, timesteps=8).x_test, g.x_test)
    with pytest.raises(ValueError):
        load_mnist(n_train=5000, n_test=1)


def test_event_surrogate_and_neuron_defaults():
    cfg = ModelConfig.preset("event_small")
    assert cfg.neuron == LIFParams(beta=0.5, v_th=1.0, surrogate=SurrogateSpec("arctan", 2.0),
                                   reset="subtract_detached")
    assert cfg.voters == 10 and cfg.classes == 4 and len(cfg.widths) == 3
