"""scikit-learn style wrappers around the network and fitting code.

``SpikingClassifier`` trains one network of a given neuron kind;
``AlternativeNeuronFitter`` fits the deterministic student of a trained
oscillation classifier.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import network as nw
from .defense import FitConfig, fit_alternative, spike_agreement
from .exceptions import InvalidInputError
from .neurons import NEURON_KINDS, OSCILLATION, NeuronParams


def _check_images(X, y=None):
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise InvalidInputError("pixel values must lie in [0, 1]")
    return X, y


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SpikingClassifier(ClassifierMixin, BaseEstimator):
    """Spiking network classifier trained with surrogate gradients.

    Inputs are arrays of shape ``N×C×H×W`` (or ``N×D``) in ``[0, 1]``.
    ``decision_function`` returns output firing rates; ``predict_proba`` is
    their softmax, which is also what the training loss sees.
    """

    def __init__(self, preset="mlp", neuron_kind="lif", neuron_params=None, timesteps=8, hidden=256,
                 dropout=0.5, epochs=30, lr0=1e-3, t_max=None, batch_size=32, seed=0, verbose=False):
        self.preset = preset
        self.neuron_kind = neuron_kind
        self.neuron_params = neuron_params
        self.timesteps = timesteps
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.lr0 = lr0
        self.t_max = t_max
        self.batch_size = batch_size
        self.seed = seed
        self.verbose = verbose

    def _spec(self, input_shape, n_classes):
        if self.preset == "mlp":
            return nw.mlp_preset(input_shape, self.hidden, n_classes, self.timesteps, self.dropout)
        if self.preset == "cnn":
            return nw.cnn_preset(input_shape, n_classes, self.timesteps, self.dropout)
        raise InvalidInputError(f"unknown preset {self.preset!r}")

    def fit(self, X, y):
        X, y = _check_images(X, y)
        if self.neuron_kind not in NEURON_KINDS:
            raise InvalidInputError(f"unknown neuron kind {self.neuron_kind!r}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        params = NeuronParams.from_dict(self.neuron_params or {})
        spec = self._spec(X.shape[1:], len(self.classes_))
        net = nw.build(spec, seed=self.seed, neuron_kind=self.neuron_kind, neuron_params=params)
        cfg = nw.TrainConfig(epochs=self.epochs, lr0=self.lr0, t_max=self.t_max or self.epochs,
                             batch_size=self.batch_size, seed=self.seed)
        log = print if self.verbose else None
        self.network_, self.history_ = nw.train(net, (X, encoded), cfg, log=log)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_network(cls, net: nw.Network, classes=None):
        """Wrap an already trained network (e.g. a loaded checkpoint)."""
        est = cls(neuron_kind=net.neuron_kind, neuron_params=net.neuron_params.to_dict(),
                  timesteps=net.spec.timesteps)
        est.network_ = net
        est.history_ = []
        est.classes_ = np.arange(net.spec.num_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = int(np.prod(net.spec.input_shape))
        return est

    def with_neuron(self, kind, **param_updates):
        """Fitted copy that runs the same weights with another neuron kind."""
        check_is_fitted(self, "network_")
        return type(self).from_network(self.network_.with_kind(kind, **param_updates), self.classes_)

    def decision_function(self, X, seed=0):
        check_is_fitted(self, "network_")
        X, _ = _check_images(X)
        X = X.reshape((len(X),) + self.network_.spec.input_shape)
        return nw.predict_rates(self.network_, X, seed)

    def predict_proba(self, X, seed=0):
        return _softmax(self.decision_function(X, seed))

    def predict(self, X, seed=0):
        rates = self.decision_function(X, seed)
        return self.classes_[rates.argmax(axis=1)]


class AlternativeNeuronFitter(BaseEstimator):
    """Fit the two mapping parameters of a deterministic student.

    ``teacher`` is a fitted oscillation :class:`SpikingClassifier` or a bare
    oscillation network. After ``fit(X)`` the fitted values live in ``c_``
    and ``d_``, the student classifier in ``student_``.
    """

    def __init__(self, teacher=None, mapping_kind="F1", epochs=3, lr=1e-2, batch_size=64, seed=0):
        self.teacher = teacher
        self.mapping_kind = mapping_kind
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _teacher_net(self):
        if isinstance(self.teacher, nw.Network):
            return self.teacher, None
        check_is_fitted(self.teacher, "network_")
        return self.teacher.network_, self.teacher.classes_

    def fit(self, X, y=None):
        X, _ = _check_images(X)
        net, classes = self._teacher_net()
        if net.neuron_kind != OSCILLATION:
            raise InvalidInputError(f"teacher must use oscillation neurons, got {net.neuron_kind!r}")
        X = X.reshape((len(X),) + net.spec.input_shape)
        cfg = FitConfig(self.epochs, self.lr, self.batch_size, self.seed, self.mapping_kind)
        student, self.c_, self.d_, self.loss_, self.history_ = fit_alternative(net, cfg, (X, np.zeros(len(X), int)))
        self.student_ = SpikingClassifier.from_network(student, classes)
        return self

    def score(self, X, y=None):
        """Spike agreement between teacher and student on ``X``."""
        check_is_fitted(self, "student_")
        net, _ = self._teacher_net()
        X, _ = _check_images(X)
        X = X.reshape((len(X),) + net.spec.input_shape)
        return spike_agreement(net, self.student_.network_, (X, np.zeros(len(X), int)), self.seed)
