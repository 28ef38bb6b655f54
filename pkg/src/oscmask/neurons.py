"""Spiking neuron models: LIF, noisy oscillation, and its deterministic stand-in.

All three share the same integrate / fire / hard-reset skeleton::

    H = decay * V_prev + I
    P = H                      (LIF)
    P = f(H + noise)           (oscillation, noise ~ U[noise_lo, noise_hi])
    P = f(H + M(H; c, d))      (alternative, M one of F1..F4)
    S = [P > v_th]
    V = P * (1 - S) + v_reset * S

``f`` is the leaky transfer ``x if x >= 0 else leaky_slope * x``. The spike
threshold's backward pass is replaced by the arctan surrogate, and the reset
factor ``(1 - S)`` is detached.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .exceptions import InvalidParameterError, ShapeError
from .tensor import Tensor

LIF = "lif"
OSCILLATION = "oscillation"
ALTERNATIVE = "alternative"
NEURON_KINDS = (LIF, OSCILLATION, ALTERNATIVE)
MAPPING_KINDS = ("F1", "F2", "F3", "F4")


@dataclass
class NeuronParams:
    v_th: float = 1.0
    v_reset: float = 0.0
    decay: float = 0.5
    alpha: float = 3.0
    leaky_slope: float = -0.03
    noise_lo: float = -0.2
    noise_hi: float = 0.8
    mapping_kind: str = "F1"
    c: float = 0.0
    d: float = 0.0
    # "exact": surrogate evaluated at f(H+noise) - v_th (true chain rule).
    # "literal": surrogate evaluated at H+noise - v_th on both branches.
    surrogate_arg: str = "exact"

    def __post_init__(self):
        if not self.v_reset < self.v_th:
            raise InvalidParameterError(f"v_reset ({self.v_reset}) must be below v_th ({self.v_th})")
        if self.noise_lo > self.noise_hi:
            raise InvalidParameterError(f"noise_lo ({self.noise_lo}) exceeds noise_hi ({self.noise_hi})")
        if not self.alpha > 0:
            raise InvalidParameterError(f"alpha must be positive, got {self.alpha}")
        if self.mapping_kind not in MAPPING_KINDS:
            raise InvalidParameterError(f"unknown mapping kind {self.mapping_kind!r}")
        if self.surrogate_arg not in ("exact", "literal"):
            raise InvalidParameterError(f"surrogate_arg must be 'exact' or 'literal', got {self.surrogate_arg!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown neuron parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NeuronState:
    v: Tensor

    @classmethod
    def reset(cls, shape, params: NeuronParams):
        return cls(Tensor(np.full(shape, params.v_reset)))


# ---------------------------------------------------------------------------
# Scalar / array building blocks
# ---------------------------------------------------------------------------


def atan_surrogate(x, params: NeuronParams):
    """Derivative of the scaled arctan, peaked at ``v_th`` with height alpha/2."""
    a = params.alpha
    z = (math.pi / 2) * a * (np.asarray(x, dtype=np.float64) - params.v_th)
    return a / (2 * (1 + z * z))


def leaky_f(x, params: NeuronParams):
    """Return ``(f(x), f'(x))``; the derivative at exactly 0 takes the leaky slope."""
    x = np.asarray(x, dtype=np.float64)
    value = np.where(x >= 0, x, params.leaky_slope * x)
    deriv = np.where(x > 0, 1.0, params.leaky_slope)
    return value, deriv


def mapping_fn(kind, H, c, d):
    H = np.asarray(H, dtype=np.float64)
    if kind == "F1":
        return np.sin(H + c) + d
    if kind == "F2":
        return H * np.sin(H + c) + d
    if kind == "F3":
        return np.exp(H + c) + d
    if kind == "F4":
        return 1.0 / (1.0 + np.exp(-c * H)) + d
    raise InvalidParameterError(f"unknown mapping kind {kind!r}")


def mapping_deriv(kind, H, c, d):
    """d/dH of :func:`mapping_fn`."""
    H = np.asarray(H, dtype=np.float64)
    if kind == "F1":
        return np.cos(H + c)
    if kind == "F2":
        return np.sin(H + c) + H * np.cos(H + c)
    if kind == "F3":
        return np.exp(H + c)
    if kind == "F4":
        s = 1.0 / (1.0 + np.exp(-c * H))
        return c * s * (1 - s)
    raise InvalidParameterError(f"unknown mapping kind {kind!r}")


def mapping_tensor(kind, H: Tensor, c, d):
    """Differentiable version of :func:`mapping_fn` (grads reach H, c and d)."""
    if kind == "F1":
        return tc.sin(H + c) + d
    if kind == "F2":
        return H * tc.sin(H + c) + d
    if kind == "F3":
        return tc.exp(H + c) + d
    if kind == "F4":
        return tc.sigmoid(c * H) + d
    raise InvalidParameterError(f"unknown mapping kind {kind!r}")


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def spike(x: Tensor, params: NeuronParams) -> Tensor:
    """Heaviside ``[x > v_th]`` forward, arctan surrogate backward."""
    op = tc.custom_grad(
        lambda a: (a > params.v_th).astype(np.float64),
        lambda saved, g: (g * atan_surrogate(saved[0], params),),
        name="spike",
    )
    return op(x)


def leaky(x: Tensor, params: NeuronParams) -> Tensor:
    op = tc.custom_grad(
        lambda a: leaky_f(a, params)[0],
        lambda saved, g: (g * leaky_f(saved[0], params)[1],),
        name="leaky",
    )
    return op(x)


def _spike_literal(u: Tensor, params: NeuronParams) -> Tensor:
    # Forward fires on f(u) > v_th; backward uses the surrogate at u - v_th.
    def fwd(a):
        return (leaky_f(a, params)[0] > params.v_th).astype(np.float64)

    def bwd(saved, g):
        a = saved[0]
        return (g * atan_surrogate(a, params) * leaky_f(a, params)[1],)

    return tc.custom_grad(fwd, bwd, name="spike_literal")(u)


def _check_shapes(state: NeuronState, current: Tensor):
    if state.v.shape != current.shape:
        raise ShapeError(f"membrane state {state.v.shape} does not match input current {current.shape}")


def _fire_and_reset(P: Tensor, S: Tensor, params: NeuronParams):
    s = S.detach()
    V = P * (1.0 - s) + params.v_reset * s
    return S, NeuronState(V)


def lif_step(state: NeuronState, current, params: NeuronParams):
    current = tc.as_tensor(current)
    _check_shapes(state, current)
    H = params.decay * state.v + current
    return _fire_and_reset(H, spike(H, params), params)


def _through_transfer(u: Tensor, params: NeuronParams):
    P = leaky(u, params)
    if params.surrogate_arg == "literal":
        return P, _spike_literal(u, params)
    return P, spike(P, params)


def osc_step(state: NeuronState, current, params: NeuronParams, rng=None, noise=None):
    """One oscillation-neuron step.

    ``noise`` may be given explicitly; otherwise it is drawn with
    ``rng.uniform(noise_lo, noise_hi, shape)``.
    """
    current = tc.as_tensor(current)
    _check_shapes(state, current)
    if noise is None:
        if rng is None:
            raise InvalidParameterError("osc_step needs either rng or explicit noise")
        noise = rng.uniform(params.noise_lo, params.noise_hi, current.shape)
    H = params.decay * state.v + current
    P, S = _through_transfer(H + np.asarray(noise, dtype=np.float64), params)
    return _fire_and_reset(P, S, params)


def alt_step(state: NeuronState, current, params: NeuronParams, c=None, d=None):
    """One step of the deterministic neuron; ``c``/``d`` may be grad-tracked tensors."""
    current = tc.as_tensor(current)
    _check_shapes(state, current)
    c = params.c if c is None else c
    d = params.d if d is None else d
    H = params.decay * state.v + current
    P, S = _through_transfer(H + mapping_tensor(params.mapping_kind, H, c, d), params)
    return _fire_and_reset(P, S, params)


def step(kind, state, current, params, rng=None, mapping=None):
    if kind == LIF:
        return lif_step(state, current, params)
    if kind == OSCILLATION:
        return osc_step(state, current, params, rng=rng)
    if kind == ALTERNATIVE:
        c, d = mapping if mapping is not None else (None, None)
        return alt_step(state, current, params, c=c, d=d)
    raise InvalidParameterError(f"unknown neuron kind {kind!r}")


# ---------------------------------------------------------------------------
# Closed-form dS/dH
# ---------------------------------------------------------------------------


def closed_form_grad(model_kind, H, noise_or_cd, params: NeuronParams):
    """Closed-form dS/dH written exactly as derived for the two noisy neurons.

    For ``"oscillation"`` pass the noise value(s); for ``"alternative"`` pass
    ``(c, d)`` (F1 mapping). Both branch on the sign of the transfer argument
    and evaluate the surrogate at that argument minus ``v_th``.
    """
    H = np.asarray(H, dtype=np.float64)
    a, slope = params.alpha, params.leaky_slope
    if model_kind == OSCILLATION:
        u = H + np.asarray(noise_or_cd, dtype=np.float64)
        num = a
    elif model_kind == ALTERNATIVE:
        c, d = noise_or_cd
        u = H + np.sin(H + c) + d
        num = a * (1 + np.cos(H + c))
    else:
        raise InvalidParameterError(f"closed form defined for oscillation/alternative, got {model_kind!r}")
    z = (math.pi / 2) * a * (u - params.v_th)
    base = num / (2 * (1 + z * z))
    return np.where(u >= 0, base, slope * base)
