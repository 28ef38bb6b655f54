import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oscmask import attacks as at
from oscmask import data, network as nw
from oscmask import tensor as tc
from oscmask.attacks import AttackConfig
from oscmask.exceptions import InvalidParameterError, ShapeError


def const(g):
    return lambda x, y, m: np.full(np.shape(x), float(g))


def zero(x, y, m):
    return np.zeros_like(x)


@pytest.fixture(scope="module")
def trained_lif():
    ds = data.bundled_mnist()
    tr, ev = data.split(ds, 300, seed=1)
    net = nw.build(nw.mlp_preset(hidden=128), seed=0)
    nw.train(net, tr.take(np.arange(3000)), nw.TrainConfig(epochs=2, lr0=1e-3, t_max=2, batch_size=32))
    return net, ev


# --- config ---------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = AttackConfig("pgd")
    assert cfg.kind == "PGD" and cfg.epsilon == 8 / 255 and cfg.iters == 5 and cfg.mim_mu == 1.0
    assert cfg.pgd_step == pytest.approx(2 / 255)
    assert AttackConfig("BIM", iters=5).label == "BIM-5" and AttackConfig("FGSM").label == "FGSM"
    for bad in (dict(kind="CW"), dict(epsilon=1.5), dict(epsilon=-0.1), dict(iters=0), dict(pgd_step=-1.0)):
        with pytest.raises(InvalidParameterError):
            AttackConfig(**{"kind": "FGSM", **bad})
    assert AttackConfig("PGD", epsilon=0.0).pgd_step == 0.0


# --- clip_ball ------------------------------------------------------------

def test_clip_ball_hand_values():
    assert at.clip_ball([0.5], [0.5], 0.1)[0] == 0.5
    assert at.clip_ball([0.9], [0.5], 0.1)[0] == pytest.approx(0.6, abs=1e-15)
    assert at.clip_ball([-0.3], [0.02], 0.1)[0] == 0.0
    with pytest.raises(ShapeError):
        at.clip_ball(np.zeros(3), np.zeros(2), 0.1)


# --- hand examples --------------------------------------------------------

def test_fgsm_hand_values():
    cfg = AttackConfig("FGSM", epsilon=0.1)
    assert at.fgsm(const(-3), np.array([0.5]), [0], cfg)[0] == pytest.approx(0.4, abs=1e-15)
    assert at.fgsm(const(1), np.array([0.98]), [0], cfg)[0] == 1.0
    x = np.random.default_rng(0).uniform(0, 1, (3, 4))
    assert np.array_equal(at.fgsm(zero, x, [0] * 3, cfg), x)


def test_bim_hand_values():
    steps = []

    def recording(x, y, m):
        steps.append(x.copy())
        return np.ones_like(x)

    out = at.bim(recording, np.array([0.5]), [0], AttackConfig("BIM", epsilon=0.1, iters=2))
    assert [s[0] for s in steps] == pytest.approx([0.5, 0.55])
    assert out[0] == pytest.approx(0.6, abs=1e-15)


@pytest.mark.parametrize("kind", at.ATTACK_KINDS)
def test_zero_gradient_fixed_point(kind):
    x = np.random.default_rng(1).uniform(0, 1, (4, 5))
    out = at.generate(zero, x, [0] * 4, AttackConfig(kind, epsilon=0.1, iters=3))
    if kind == "PGD":
        # random start stays put when no gradient moves it
        assert np.max(np.abs(out - x)) <= 0.1 + 1e-12
    else:
        assert np.array_equal(out, x)


@pytest.mark.parametrize("kind", at.ATTACK_KINDS)
def test_empty_ball(kind):
    x = np.random.default_rng(2).uniform(0, 1, (3, 6))
    out = at.generate(const(1), x, [0] * 3, AttackConfig(kind, epsilon=0.0, iters=3))
    assert np.array_equal(out, x)


# --- reductions -----------------------------------------------------------

def _noisy_provider(seed):
    def provider(x, y, m):
        return np.random.default_rng([seed, m]).normal(size=x.shape) * (1 + x)
    return provider


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.5))
def test_bim_one_step_is_clipped_fgsm(seed, eps):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 8))
    p = _noisy_provider(seed)
    one = at.bim(p, x, None, AttackConfig("BIM", epsilon=eps, iters=1))
    assert np.array_equal(one, at.clip_ball(at.fgsm(p, x, None, AttackConfig("FGSM", epsilon=eps)), x, eps))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), iters=st.integers(1, 6))
def test_mim_without_momentum_is_bim(seed, iters):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 8))
    p = _noisy_provider(seed)
    a = at.mim(p, x, None, AttackConfig("MIM", epsilon=0.2, iters=iters, mim_mu=0.0))
    b = at.bim(p, x, None, AttackConfig("BIM", epsilon=0.2, iters=iters))
    assert np.array_equal(a, b)


def test_mim_constant_direction_matches_bim():
    x = np.random.default_rng(3).uniform(0, 1, (2, 10))
    direction = np.sign(np.random.default_rng(4).normal(size=x.shape))
    p = lambda xm, y, m: direction * (m + 1.0)  # noqa: E731
    a = at.mim(p, x, None, AttackConfig("MIM", epsilon=0.1, iters=4, mim_mu=1.0))
    b = at.bim(p, x, None, AttackConfig("BIM", epsilon=0.1, iters=4))
    assert np.array_equal(a, b)


def test_mim_normalizes_per_sample():
    g = np.array([[1.0, -3.0], [0.0, 0.0], [2.0, 2.0]])
    n = at._l1_normalize(g)
    assert np.allclose(n, [[0.25, -0.75], [0, 0], [0.5, 0.5]])


# --- containment ----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, (4, 6), elements=st.floats(0, 1)), eps=st.floats(0, 1),
       kind=st.sampled_from(at.ATTACK_KINDS), iters=st.integers(1, 5), seed=st.integers(0, 100))
def test_containment_property(x, eps, kind, iters, seed):
    out = at.generate(_noisy_provider(seed), x, None, AttackConfig(kind, epsilon=eps, iters=iters, seed=seed))
    assert np.max(np.abs(out - x)) <= eps + 1e-12
    assert out.min() >= 0 and out.max() <= 1


def test_pgd_iterates_stay_in_ball():
    x = np.random.default_rng(5).uniform(0, 1, (5, 7))
    seen = []

    def provider(xm, y, m):
        seen.append(xm.copy())
        return np.random.default_rng(m).normal(size=xm.shape)

    out = at.pgd(provider, x, None, AttackConfig("PGD", epsilon=0.05, iters=6, pgd_step=0.03))
    for xm in seen + [out]:
        assert np.max(np.abs(xm - x)) <= 0.05 + 1e-12


def test_pgd_seeded():
    x = np.random.default_rng(6).uniform(0, 1, (3, 5))
    cfg = AttackConfig("PGD", epsilon=0.1, iters=2, seed=9)
    assert np.array_equal(at.pgd(zero, x, None, cfg), at.pgd(zero, x, None, cfg))
    other = at.pgd(zero, x, None, AttackConfig("PGD", epsilon=0.1, iters=2, seed=10))
    assert not np.array_equal(other, at.pgd(zero, x, None, cfg))


# --- network-backed providers ---------------------------------------------

def test_network_provider_streams_and_determinism(trained_lif):
    net, ev = trained_lif
    osc = net.with_kind("oscillation")
    x, y = ev.images[:6], ev.labels[:6]
    log = []
    p = at.network_grad_provider(osc, seed=3, sample_ids=np.arange(10, 16), batch_size=4, stream_log=log)
    g0 = p(x, y, 0)
    assert sorted(log) == [(3, i, 1, 0) for i in range(10, 16)]
    # chunking only changes BLAS summation order
    whole = at.network_grad_provider(osc, seed=3, sample_ids=np.arange(10, 16))(x, y, 0)
    assert np.allclose(g0, whole, rtol=1e-12, atol=1e-15)
    assert np.array_equal(g0, p(x, y, 0))
    assert not np.array_equal(g0, p(x, y, 1))
    cfg = AttackConfig("MIM", epsilon=0.1, iters=2)
    assert np.array_equal(at.generate(p, x, y, cfg), at.generate(p, x, y, cfg))


def test_attacks_ascend_loss(trained_lif):
    net, ev = trained_lif
    x, y = ev.images[:200], ev.labels[:200]

    def mean_loss(xs):
        rates = nw.predict_rates(net, xs)
        return tc.cross_entropy(tc.as_tensor(rates), y).item()

    clean = mean_loss(x)
    p = at.network_grad_provider(net)
    for kind in at.ATTACK_KINDS:
        adv = at.generate(p, x, y, AttackConfig(kind, epsilon=0.1, iters=3))
        assert mean_loss(adv) >= clean, kind


# --- persistence ----------------------------------------------------------

def test_save_load_adversarial(tmp_path):
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 4, 4))
    manifest = {"attack": AttackConfig("PGD", epsilon=0.1).to_dict(), "source_indices": [4, 8, 15]}
    at.save_adversarial(x, tmp_path / "adv_PGD-5_eps0.1", manifest)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["adv_PGD-5_eps0.1.json", "adv_PGD-5_eps0.1.npy"]
    back, meta = at.load_adversarial(tmp_path / "adv_PGD-5_eps0.1.npy")
    assert np.array_equal(back, x) and meta == manifest
