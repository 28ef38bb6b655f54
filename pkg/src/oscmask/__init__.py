"""Spiking networks whose noisy oscillation neurons mask input gradients.

The public surface is small: build or train a :class:`~oscmask.network.Network`,
fit its deterministic stand-in with :func:`~oscmask.defense.fit_alternative`,
and attack either with :mod:`oscmask.attacks`.
"""

from .attacks import AttackConfig, generate
from .data import Dataset, bundled_mnist, load_cifar10_bin, load_idx, sample_subset
from .defense import FitConfig, fit_alternative, run_scenario, scenario_matrix, spike_agreement
from .estimator import AlternativeNeuronFitter, SpikingClassifier
from .exceptions import OscMaskError
from .network import Network, NetworkSpec, TrainConfig, build, evaluate, forward_T, train
from .neurons import ALTERNATIVE, LIF, OSCILLATION, NeuronParams

__version__ = "0.1.0"

__all__ = [
    "ALTERNATIVE", "LIF", "OSCILLATION", "AlternativeNeuronFitter", "AttackConfig", "Dataset", "FitConfig",
    "Network", "NetworkSpec", "NeuronParams", "OscMaskError", "SpikingClassifier", "TrainConfig", "build",
    "bundled_mnist", "evaluate", "fit_alternative", "forward_T", "generate", "load_cifar10_bin", "load_idx",
    "run_scenario", "sample_subset", "scenario_matrix", "spike_agreement", "train",
]
