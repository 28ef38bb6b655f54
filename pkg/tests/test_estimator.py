import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oscmask import network as nw
from oscmask.data import bundled_mnist
from oscmask.estimator import AlternativeNeuronFitter, SpikingClassifier
from oscmask.exceptions import InvalidInputError


@pytest.fixture(scope="module")
def digits():
    ds = bundled_mnist()
    keep = np.isin(ds.labels, [3, 7])
    order = np.random.default_rng(0).permutation(int(keep.sum()))
    x, y = ds.images[keep][order], ds.labels[keep][order]
    return x[:600], y[:600], x[600:800], y[600:800]


@pytest.fixture(scope="module")
def osc_clf(digits):
    x, y, _, _ = digits
    return SpikingClassifier(neuron_kind="oscillation", hidden=32, timesteps=4, epochs=2).fit(x, y)


def test_params_and_clone():
    est = SpikingClassifier(hidden=64, neuron_params={"alpha": 2.0})
    params = est.get_params()
    assert params["hidden"] == 64 and params["epochs"] == 30 and params["lr0"] == 1e-3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(epochs=2).epochs == 2


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SpikingClassifier().predict(np.zeros((1, 1, 28, 28)))


def test_fit_predict_with_arbitrary_labels(osc_clf, digits):
    _, _, xt, yt = digits
    assert list(osc_clf.classes_) == [3, 7]
    assert osc_clf.network_.spec.num_classes == 2
    pred = osc_clf.predict(xt)
    assert set(pred) <= {3, 7} and osc_clf.score(xt, yt) > 0.8
    proba = osc_clf.predict_proba(xt)
    assert np.allclose(proba.sum(axis=1), 1) and np.array_equal(proba.argmax(axis=1), (pred == 7).astype(int))
    assert np.array_equal(osc_clf.predict(xt), pred)
    assert osc_clf.n_features_in_ == 784 and len(osc_clf.history_) == 2


def test_flat_input_accepted(osc_clf, digits):
    _, _, xt, _ = digits
    assert np.array_equal(osc_clf.predict(xt.reshape(len(xt), -1)), osc_clf.predict(xt))


def test_input_validation(digits):
    x, y, _, _ = digits
    with pytest.raises(InvalidInputError):
        SpikingClassifier(epochs=1).fit(x * 2, y)
    with pytest.raises(InvalidInputError):
        SpikingClassifier(epochs=1, neuron_kind="izhikevich").fit(x[:10], y[:10])
    with pytest.raises(ValueError):
        SpikingClassifier(epochs=1).fit(x[:10], y[:9])


def test_with_neuron_shares_weights(osc_clf):
    lif = osc_clf.with_neuron("lif")
    assert lif.network_.weights is osc_clf.network_.weights
    assert lif.network_.neuron_kind == "lif" and osc_clf.network_.neuron_kind == "oscillation"


def test_from_network_round_trip(osc_clf, digits, tmp_path):
    _, _, xt, _ = digits
    nw.save(osc_clf.network_, tmp_path / "m.ckpt")
    back = SpikingClassifier.from_network(nw.load(tmp_path / "m.ckpt"), osc_clf.classes_)
    assert np.array_equal(back.predict(xt), osc_clf.predict(xt))


def test_alternative_fitter(osc_clf, digits):
    x, _, xt, yt = digits
    fitter = AlternativeNeuronFitter(osc_clf, epochs=1, batch_size=32).fit(x[:200])
    assert np.isfinite([fitter.c_, fitter.d_]).all()
    assert fitter.loss_ <= fitter.history_["initial_loss"]
    student = fitter.student_
    assert student.network_.neuron_kind == "alternative" and list(student.classes_) == [3, 7]
    assert 0.5 < fitter.score(xt) <= 1.0
    assert abs(student.score(xt, yt) - osc_clf.score(xt, yt)) < 0.15
    with pytest.raises(InvalidInputError):
        AlternativeNeuronFitter(osc_clf.with_neuron("lif")).fit(x[:10])
    with pytest.raises(NotFittedError):
        AlternativeNeuronFitter(osc_clf).score(xt)
