"""Non-targeted l-infinity gradient attacks: FGSM, BIM, MIM and PGD.

Attacks talk to the model only through a *gradient provider*, a callable
``grad_provider(x, y, iteration) -> dL/dx`` returning an array shaped like
``x``. The iteration index lets stochastic providers draw fresh, reproducible
noise on every step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import InvalidParameterError, ShapeError
from .network import STREAM_GENERATE, Network, SampleNoise, auto_batch_size, input_gradient

ATTACK_KINDS = ("FGSM", "BIM", "MIM", "PGD")


@dataclass
class AttackConfig:
    kind: str = "FGSM"
    epsilon: float = 8 / 255
    iters: int = 5
    mim_mu: float = 1.0
    pgd_step: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in ATTACK_KINDS:
            raise InvalidParameterError(f"unknown attack kind {self.kind!r}")
        # epsilon = 0 is accepted as the degenerate empty ball
        if not 0 <= self.epsilon <= 1:
            raise InvalidParameterError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iters < 1:
            raise InvalidParameterError(f"iters must be >= 1, got {self.iters}")
        if self.pgd_step is None:
            self.pgd_step = self.epsilon / 4
        elif self.pgd_step < 0 or (self.pgd_step == 0 and self.epsilon > 0):
            raise InvalidParameterError(f"pgd_step must be positive, got {self.pgd_step}")

    @property
    def label(self):
        return self.kind if self.kind == "FGSM" else f"{self.kind}-{self.iters}"

    def to_dict(self):
        return asdict(self)


def clip_ball(x_cand, x_ref, epsilon):
    """Project onto the l-inf ball of radius ``epsilon`` around ``x_ref``, then onto [0, 1]."""
    x_cand, x_ref = np.asarray(x_cand, dtype=np.float64), np.asarray(x_ref, dtype=np.float64)
    if x_cand.shape != x_ref.shape:
        raise ShapeError(f"clip_ball: candidate {x_cand.shape} vs reference {x_ref.shape}")
    out = np.minimum(np.maximum(x_cand, x_ref - epsilon), x_ref + epsilon)
    return np.minimum(np.maximum(out, 0.0), 1.0)


def fgsm(grad_provider, x, y, cfg: AttackConfig):
    x = np.asarray(x, dtype=np.float64)
    g = grad_provider(x, y, 0)
    return np.clip(x + cfg.epsilon * np.sign(g), 0.0, 1.0)


def bim(grad_provider, x, y, cfg: AttackConfig):
    x = np.asarray(x, dtype=np.float64)
    step = cfg.epsilon / cfg.iters
    xm = x.copy()
    for m in range(cfg.iters):
        xm = clip_ball(xm + step * np.sign(grad_provider(xm, y, m)), x, cfg.epsilon)
    return xm


def _l1_normalize(g):
    flat = np.abs(g).reshape(len(g), -1).sum(axis=1)
    norm = flat.reshape((-1,) + (1,) * (g.ndim - 1))
    # zero gradient -> zero normalized term instead of 0/0
    return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def mim(grad_provider, x, y, cfg: AttackConfig):
    """Momentum iterative method; the l1 norm is taken per sample."""
    x = np.asarray(x, dtype=np.float64)
    step = cfg.epsilon / cfg.iters
    xm = x.copy()
    velocity = np.zeros_like(x)
    for m in range(cfg.iters):
        velocity = cfg.mim_mu * velocity + _l1_normalize(grad_provider(xm, y, m))
        xm = clip_ball(xm + step * np.sign(velocity), x, cfg.epsilon)
    return xm


def pgd(grad_provider, x, y, cfg: AttackConfig):
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    xm = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape), 0.0, 1.0)
    for m in range(cfg.iters):
        xm = clip_ball(xm + cfg.pgd_step * np.sign(grad_provider(xm, y, m)), x, cfg.epsilon)
    return xm


_DISPATCH = {"FGSM": fgsm, "BIM": bim, "MIM": mim, "PGD": pgd}


def generate(grad_provider, x, y, cfg: AttackConfig):
    return _DISPATCH[cfg.kind](grad_provider, x, y, cfg)


def network_grad_provider(net: Network, kind=None, seed=0, sample_ids=None, batch_size=None, stream_log=None):
    """Gradient provider backed by ``net`` run with the given neuron kind.

    Oscillation noise for sample ``i`` at attack iteration ``m`` is drawn from
    the stream keyed ``(seed, i, STREAM_GENERATE, m)``; each key used is
    appended to ``stream_log`` when one is supplied.
    """

    batch_size = batch_size or max(1, auto_batch_size(net) // 2)

    def provider(x, y, iteration):
        ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
        y = np.asarray(y)
        grads = []
        for start in range(0, len(x), batch_size):
            sl = slice(start, start + batch_size)
            stream = (STREAM_GENERATE, iteration)
            noise = SampleNoise(seed, ids[sl], stream)
            if stream_log is not None:
                stream_log.extend((seed, int(i), *stream) for i in ids[sl])
            g = input_gradient(net, x[sl], y[sl], kind=kind, rng=noise)
            # chunk means -> gradient of the mean over the whole call
            grads.append(g * (len(g) / len(x)))
        return np.concatenate(grads)

    return provider


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".npy", ".json") else path


def save_adversarial(x_adv, path, manifest):
    """Write ``<path>.npy`` (float64 tensor) and ``<path>.json`` (replay manifest)."""
    stem = _stem(path)
    np.save(f"{stem}.npy", np.asarray(x_adv, dtype="<f8"), allow_pickle=False)
    Path(f"{stem}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_adversarial(path):
    stem = _stem(path)
    return np.load(f"{stem}.npy", allow_pickle=False), json.loads(Path(f"{stem}.json").read_text())
