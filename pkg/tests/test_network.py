import math

import numpy as np
import pytest

from oscmask import data, network as nw, neurons
from oscmask import tensor as tc
from oscmask.exceptions import (FormatError, InvalidInputError, InvalidParameterError, SpecError,
                                TrainingDivergedError)
from oscmask.neurons import NeuronParams, NeuronState
from oscmask.optim import cosine_lr


def dense_spec(n_in=784, k=10, T=8, shape=None):
    return nw.NetworkSpec([{"type": "dense", "out_features": k}, {"type": "spiking"}],
                          shape or (n_in,), k, T)


def toy_set(n=20, seed=0):
    # two classes that light up disjoint halves of a 4-pixel image
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.2, (n, 4))
    x[y == 0, :2] += 0.8
    x[y == 1, 2:] += 0.8
    return data.Dataset(x, y, "toy", 2)


# --- specs / build --------------------------------------------------------

def test_build_minimal_net():
    net = nw.build(dense_spec(), seed=0)
    assert list(net.weights) == ["0.weight"] and net.weights["0.weight"].shape == (784, 10)
    bound = math.sqrt(6 / 784)
    assert np.abs(net.weights["0.weight"].data).max() <= bound


def test_build_deterministic():
    a, b = nw.build(nw.mlp_preset(), seed=3), nw.build(nw.mlp_preset(), seed=3)
    assert a.checksum() == b.checksum()
    assert nw.build(nw.mlp_preset(), seed=4).checksum() != a.checksum()


def test_build_cnn_bn_init():
    net = nw.build(nw.cnn_preset(), seed=0)
    assert np.all(net.weights["1.gamma"].data == 1) and np.all(net.weights["1.beta"].data == 0)
    assert net.spec.shapes[-1] == (10,)


@pytest.mark.parametrize("layers,match", [
    ([{"type": "conv2d", "out_channels": 4, "kernel": 40}, {"type": "spiking"}], "layer 0"),
    ([{"type": "dense", "out_features": 10}, {"type": "avg_pool", "window": 2}, {"type": "spiking"}], "layer 1"),
    ([{"type": "dense", "out_features": 7}, {"type": "spiking"}], "final layer"),
    ([{"type": "dense", "out_features": 10}], "spiking"),
    ([{"type": "pool", "window": 2}], "unknown layer type"),
    ([{"type": "dense", "out_features": 10, "bias": True}, {"type": "spiking"}], "unknown keys"),
])
def test_spec_errors_name_the_layer(layers, match):
    with pytest.raises(SpecError, match=match):
        nw.NetworkSpec(layers, (1, 28, 28), 10)


def test_spec_round_trip():
    spec = nw.cnn_preset()
    again = nw.NetworkSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict() and again.shapes == spec.shapes


# --- forward --------------------------------------------------------------

def test_silent_network():
    net = nw.build(dense_spec(), seed=0)
    net.weights["0.weight"].data[:] = 0
    rates, _ = nw.forward_T(net, np.zeros((3, 784)))
    assert np.all(rates.data == 0)


def test_seeded_forward_determinism():
    net = nw.build(nw.mlp_preset(), seed=0, neuron_kind="oscillation")
    x = np.random.default_rng(0).uniform(0, 1, (5, 1, 28, 28))
    a, _ = nw.forward_T(net, x, 7)
    b, _ = nw.forward_T(net, x, 7)
    assert np.array_equal(a.data, b.data)
    alt = net.with_kind("alternative")
    a, _ = nw.forward_T(alt, x)
    b, _ = nw.forward_T(alt, x)
    assert np.array_equal(a.data, b.data)


def test_forward_errors():
    net = nw.build(dense_spec(), seed=0)
    with pytest.raises(InvalidInputError):
        nw.forward_T(net, np.full((1, 784), 1.1))
    with pytest.raises(InvalidInputError):
        nw.forward_T(net, np.zeros((1, 783)))
    nw.forward_T(net, np.full((1, 784), 1 + 5e-10))
    with pytest.raises(InvalidParameterError):
        nw.forward_T(net.with_kind("oscillation"), np.zeros((1, 784)))


def test_rates_in_unit_interval_and_record():
    net = nw.build(nw.mlp_preset(dropout=0), seed=0, neuron_kind="oscillation")
    x = np.random.default_rng(1).uniform(0, 1, (6, 1, 28, 28))
    rates, rec = nw.forward_T(net, x, 0, record=True)
    assert rates.shape == (6, 10) and rates.data.min() >= 0 and rates.data.max() <= 1
    assert [r.shape for r in rec] == [(8, 6, 256), (8, 6, 10)]
    assert np.allclose(rec[-1].data.mean(axis=0), rates.data)


@pytest.mark.parametrize("kind", neurons.NEURON_KINDS)
def test_T1_matches_single_step(kind):
    spec = dense_spec(n_in=12, k=5, T=1)
    net = nw.build(spec, seed=2, neuron_kind=kind, neuron_params=NeuronParams(c=0.3, d=-0.1))
    x = np.random.default_rng(0).uniform(0, 1, (4, 12))
    rates, _ = nw.forward_T(net, x, np.random.default_rng(9))
    H = x @ net.weights["0.weight"].data
    s, _ = neurons.step(kind, NeuronState(np.zeros_like(H)), H, net.neuron_params, rng=np.random.default_rng(9))
    assert np.array_equal(rates.data, s.data)


def test_kind_swap_keeps_weights_and_currents():
    net = nw.build(nw.mlp_preset(), seed=0, neuron_kind="oscillation")
    before = net.checksum()
    lif = net.with_kind("lif")
    alt = net.with_kind("alternative", c=0.2)
    assert net.checksum() == before == lif.checksum() == alt.checksum()
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 28, 28))
    currents = [nw._stateless(n.spec.layers[0], 0, tc.as_tensor(x), n, False, None).data for n in (net, lif, alt)]
    assert np.array_equal(currents[0], currents[1]) and np.array_equal(currents[0], currents[2])


def test_dropout_mask_frozen_across_timesteps():
    spec = nw.NetworkSpec([{"type": "dense", "out_features": 6}, {"type": "spiking"}, {"type": "dropout", "p": 0.5},
                           {"type": "dense", "out_features": 3}, {"type": "spiking"}], (4,), 3, 6)
    net = nw.build(spec, seed=0)
    net.weights["0.weight"].data[:] = 2.0  # every hidden neuron fires every step
    net.weights["3.weight"].data[:] = np.eye(6)[:, :3] * 1.5
    rates, rec = nw.forward_T(net, np.ones((50, 4)), np.random.default_rng(0), training=True)
    # output j sees hidden j through the mask: either always on or always off
    assert set(np.unique(rates.data)) <= {0.0, 1.0}
    assert 0 < rates.data.mean() < 1


# --- training -------------------------------------------------------------

def test_cosine_lr_endpoints_and_monotone():
    assert cosine_lr(0, 1e-4, 100) == 1e-4
    assert cosine_lr(100, 1e-4, 100) == pytest.approx(0, abs=1e-20)
    lrs = [cosine_lr(e, 1e-4, 100) for e in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_defaults_and_errors():
    cfg = nw.TrainConfig()
    assert (cfg.lr0, cfg.t_max, cfg.betas, cfg.eps) == (1e-4, 100, (0.9, 0.999), 1e-8)
    for bad in (dict(epochs=0), dict(lr0=0.0), dict(batch_size=0)):
        with pytest.raises(InvalidParameterError):
            nw.TrainConfig(**bad)


def test_toy_separable_training():
    ds = toy_set()
    net = nw.build(dense_spec(n_in=4, k=2), seed=0)
    _, hist = nw.train(net, ds, nw.TrainConfig(epochs=50, lr0=1e-2, t_max=50, batch_size=4, seed=0))
    assert hist[-1]["eval_acc"] == 1.0
    assert hist[-1]["train_loss"] <= hist[0]["train_loss"]
    assert [r["epoch"] for r in hist] == list(range(50))
    assert hist[0]["lr"] == 1e-2


def test_training_is_reproducible():
    ds = toy_set()
    runs = []
    for _ in range(2):
        net = nw.build(nw.NetworkSpec([{"type": "dense", "out_features": 8}, {"type": "spiking"},
                                       {"type": "dropout", "p": 0.5}, {"type": "dense", "out_features": 2},
                                       {"type": "spiking"}], (4,), 2, 4), seed=1, neuron_kind="oscillation")
        _, hist = nw.train(net, ds, nw.TrainConfig(epochs=3, lr0=1e-2, t_max=3, batch_size=5, seed=1))
        runs.append((net.checksum(), hist))
    assert runs[0] == runs[1]


def test_train_errors(monkeypatch):
    net = nw.build(dense_spec(n_in=4, k=2), seed=0)
    with pytest.raises(InvalidInputError):
        nw.train(net, (np.zeros((0, 4)), np.zeros(0, int)), nw.TrainConfig(epochs=1))
    monkeypatch.setattr(tc, "cross_entropy", lambda logits, y: logits.sum() * float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        nw.train(net, toy_set(), nw.TrainConfig(epochs=2, batch_size=4))
    assert err.value.epoch == 0 and err.value.step == 0


# --- evaluation -----------------------------------------------------------

def test_evaluate_constant_net():
    net = nw.build(dense_spec(n_in=4, k=3), seed=0)
    W = net.weights["0.weight"].data
    W[:] = 0
    W[:, 0] = 1.0
    ds = data.Dataset(np.ones((10, 4)), np.zeros(10, int), "zeros", 3)
    assert nw.evaluate(net, ds) == 1.0
    with pytest.raises(InvalidInputError):
        nw.evaluate(net, ds.take([]))


def test_random_net_near_chance():
    ds = data.sample_subset(data.bundled_mnist(), 1000, seed=0)
    net = nw.build(nw.mlp_preset(), seed=11, neuron_kind="oscillation")
    acc = nw.evaluate(net, ds, seed=0)
    assert 0.07 <= acc <= 0.13
    assert nw.evaluate(net, ds, seed=0) == acc


def test_sample_noise_independent_of_batching():
    net = nw.build(nw.mlp_preset(), seed=0, neuron_kind="oscillation")
    x = data.bundled_mnist().images[:30]
    full = nw.predict_rates(net, x, seed=4, batch_size=30)
    chunked = nw.predict_rates(net, x, seed=4, batch_size=7)
    assert np.array_equal(full, chunked)
    sub = nw.predict_rates(net, x[10:20], seed=4, sample_ids=np.arange(10, 20))
    assert np.array_equal(sub, full[10:20])


def test_auto_batch_size():
    assert nw.auto_batch_size(nw.build(nw.mlp_preset())) == 500
    cnn = nw.build(nw.cnn_preset())
    b = nw.auto_batch_size(cnn)
    assert 1 <= b < 500 and b * 24 * 24 * 25 * 8 <= nw.ACTIVATION_BUDGET


# --- input gradients ------------------------------------------------------

def test_input_gradient_dead_network():
    net = nw.build(nw.mlp_preset(), seed=0)
    for w in net.weights.values():
        w.data[:] = 0
    g = nw.input_gradient(net, np.full((2, 1, 28, 28), 0.5), [1, 2])
    assert g.shape == (2, 1, 28, 28) and np.all(g == 0)


def _relaxed_step(kind, state, current, params, rng=None, mapping=None):
    current = tc.as_tensor(current)
    H = params.decay * state.v + current
    return tc.sigmoid(H - params.v_th), NeuronState(H)


def test_input_gradient_matches_fd_on_relaxed_net(monkeypatch):
    monkeypatch.setattr(neurons, "step", _relaxed_step)
    spec = nw.NetworkSpec([{"type": "dense", "out_features": 6}, {"type": "spiking"},
                           {"type": "dense", "out_features": 3}, {"type": "spiking"}], (5,), 3, 4)
    net = nw.build(spec, seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.8, (2, 5))
    y = np.array([0, 2])
    g = nw.input_gradient(net, x, y)

    def loss(xv):
        rates, _ = nw.forward_T(net, xv)
        return tc.cross_entropy(rates, y).item()

    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (loss(x + e) - loss(x - e)) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def test_osc_gradients_depend_on_noise():
    net = nw.build(nw.mlp_preset(dropout=0), seed=0, neuron_kind="oscillation")
    x = data.bundled_mnist().images[:4]
    y = data.bundled_mnist().labels[:4]
    g1 = nw.input_gradient(net, x, y, rng=1)
    g2 = nw.input_gradient(net, x, y, rng=2)
    assert not np.array_equal(g1, g2)
    assert np.array_equal(g1, nw.input_gradient(net, x, y, rng=1))


# --- checkpoints ----------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    net = nw.build(nw.cnn_preset(), seed=5, neuron_kind="alternative",
                   neuron_params=NeuronParams(c=-0.1441, d=-0.1762, mapping_kind="F2"))
    net.bn_stats[1]["var"][:] = np.linspace(0.5, 2, 16)
    path = tmp_path / "m.ckpt"
    nw.save(net, path, config={"note": 1})
    back = nw.load(path)
    assert back.checksum() == net.checksum()
    assert back.neuron_kind == "alternative" and back.neuron_params == net.neuron_params
    assert nw.read_header(path)[0]["config"] == {"note": 1}
    x = data.bundled_mnist().images[:20]
    assert np.array_equal(nw.predict_rates(net, x), nw.predict_rates(back, x))
    swapped = back.with_kind("lif")
    cur = [nw._stateless(n.spec.layers[0], 0, tc.as_tensor(x), n, False, None).data for n in (net, swapped)]
    assert np.array_equal(*cur)


def test_load_errors(tmp_path):
    net = nw.build(dense_spec(n_in=4, k=2), seed=0)
    path = tmp_path / "m.ckpt"
    nw.save(net, path)
    raw = path.read_bytes()
    cases = {"trunc": raw[:-3], "short": raw[:5], "magic": b"X" + raw[1:],
             "flip": raw[:-1] + bytes([raw[-1] ^ 1]),
             "version": raw[:8] + (2).to_bytes(4, "little") + raw[12:]}
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(FormatError):
            nw.load(bad)
    with pytest.raises(FileNotFoundError):
        nw.load(tmp_path / "missing.ckpt")
