"""Experiment configuration: one YAML file, strictly validated before any compute."""

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .attacks import AttackConfig
from .exceptions import InvalidParameterError
from .network import TrainConfig
from .defense import FitConfig
from .neurons import MAPPING_KINDS, NeuronParams


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    name: Literal["mnist10k", "mnist", "cifar10"] = "mnist10k"
    # explicit files; relative paths resolve against the data directory
    images: Optional[str] = None
    labels: Optional[str] = None
    paths: Optional[List[str]] = None
    eval_size: int = Field(1000, ge=1)
    train_size: Optional[int] = Field(None, ge=1)
    seed: int = 0


class NetworkSection(_Strict):
    preset: Literal["mlp", "cnn"] = "mlp"
    hidden: int = Field(256, ge=1)
    timesteps: int = Field(8, ge=1)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)


class NeuronSection(_Strict):
    v_th: float = 1.0
    v_reset: float = 0.0
    decay: float = 0.5
    alpha: float = 3.0
    leaky_slope: float = -0.03
    noise_lo: float = -0.2
    noise_hi: float = 0.8
    surrogate_arg: Literal["exact", "literal"] = "exact"


class TrainSection(_Strict):
    epochs: int = Field(30, ge=1)
    lr0: float = Field(1e-3, gt=0)
    t_max: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: Optional[int] = None


class FitSection(_Strict):
    epochs: int = Field(3, ge=1)
    lr: float = Field(1e-2, gt=0)
    batch_size: int = Field(64, ge=1)
    seed: Optional[int] = None
    mapping_kind: str = "F1"
    fit_size: Optional[int] = Field(None, ge=1)

    @field_validator("mapping_kind")
    @classmethod
    def _known_mapping(cls, v):
        if v not in MAPPING_KINDS:
            raise ValueError(f"mapping_kind must be one of {MAPPING_KINDS}")
        return v


class AttackSection(_Strict):
    kind: Literal["FGSM", "BIM", "MIM", "PGD"]
    epsilon: float = Field(0.1, ge=0.0, le=1.0)
    iters: int = Field(5, ge=1)
    mim_mu: float = 1.0
    pgd_step: Optional[float] = None


def _default_attacks():
    return [AttackSection(kind=k) for k in ("FGSM", "BIM", "MIM", "PGD")]


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = Field(1, ge=1)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    neuron: NeuronSection = Field(default_factory=NeuronSection)
    train: TrainSection = Field(default_factory=TrainSection)
    fit: FitSection = Field(default_factory=FitSection)
    attacks: List[AttackSection] = Field(default_factory=_default_attacks)

    def neuron_params(self, **updates) -> NeuronParams:
        return NeuronParams(**{**self.neuron.model_dump(), **updates})

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, lr0=t.lr0, t_max=t.t_max or t.epochs, batch_size=t.batch_size,
                           seed=self.seed if t.seed is None else t.seed)

    def fit_config(self) -> FitConfig:
        f = self.fit
        return FitConfig(epochs=f.epochs, lr=f.lr, batch_size=f.batch_size,
                         seed=self.seed if f.seed is None else f.seed, mapping_kind=f.mapping_kind)

    def attack_configs(self) -> list:
        return [AttackConfig(a.kind, a.epsilon, a.iters, a.mim_mu, a.pgd_step, self.seed) for a in self.attacks]

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise InvalidParameterError(f"cannot set {dotted!r}: {key!r} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Parse a YAML config, apply ``key.path=value`` overrides, validate.

    Override values are parsed as YAML scalars, so ``train.epochs=5`` gives
    an int and ``attacks=[]`` an empty list.
    """
    tree = {}
    if path is not None:
        text = Path(path).read_text()
        tree = yaml.safe_load(text) or {}
        if not isinstance(tree, dict):
            raise InvalidParameterError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise InvalidParameterError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    try:
        cfg = ExperimentConfig.model_validate(tree)
        cfg.neuron_params()
    except ValidationError as exc:
        raise InvalidParameterError(f"invalid config:\n{exc}") from None
    return cfg
