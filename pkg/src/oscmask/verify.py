"""Property suites run by ``oscmask verify``.

Each check returns ``(passed, detail)``; :func:`run` collects them into a
report. ``fault="alpha_sign"`` flips the sign of the surrogate for the
duration of the run, which the surrogate and gradient checks must catch.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks as at
from . import network as nw
from . import neurons
from . import tensor as tc
from .data import bundled_mnist, sample_subset
from .defense import spike_train_loss
from .gradcheck import check_op
from .neurons import ALTERNATIVE, LIF, OSCILLATION, NeuronParams, NeuronState
from .tensor import Tensor

FAULTS = ("alpha_sign",)
FD_TOL = 1e-4
ORACLE_TOL = 1e-9


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def failed(self):
        return [f"{r.suite}.{r.name}" for r in self.results if not r.passed]

    def table(self):
        width = max(len(f"{r.suite}.{r.name}") for r in self.results)
        lines = [f"{'check'.ljust(width)}  result  detail"]
        for r in self.results:
            lines.append(f"{(r.suite + '.' + r.name).ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
        return "\n".join(lines)


@contextlib.contextmanager
def inject(fault):
    if fault is None:
        yield
        return
    if fault != "alpha_sign":
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    original = neurons.atan_surrogate
    neurons.atan_surrogate = lambda x, params: -original(x, params)
    try:
        yield
    finally:
        neurons.atan_surrogate = original


# ---------------------------------------------------------------------------
# neurons
# ---------------------------------------------------------------------------


def check_surrogate_peak():
    p = NeuronParams()
    got = float(neurons.atan_surrogate(p.v_th, p))
    return abs(got - p.alpha / 2) <= 1e-12, f"surrogate(v_th)={got!r}"


def _autodiff_step_grad(step_fn, H):
    """dS/dH of one step from a zero membrane, so that H equals the input current."""
    h = Tensor(H, requires_grad=True)
    s, _ = step_fn(NeuronState(np.zeros_like(H)), h)
    tc.backward(s.sum(), wrt=[h])
    return h.grad


def check_osc_closed_form(seed=0, n=1000):
    rng = np.random.default_rng(seed)
    p = NeuronParams()
    gamma = rng.uniform(p.noise_lo, p.noise_hi, n)
    # H+gamma >= 0 branch
    H = rng.uniform(0.0, 3.0, n) - np.minimum(gamma, 0.0)
    got = _autodiff_step_grad(lambda st, h: neurons.osc_step(st, h, p, noise=gamma), H)
    want = neurons.closed_form_grad(OSCILLATION, H, gamma, p)
    err = float(np.max(np.abs(got - want)))
    return err < ORACLE_TOL, f"max abs err {err:.2e} over {n} draws"


def check_alt_closed_form(seed=0, n=1000):
    rng = np.random.default_rng(seed + 1)
    c, d = rng.uniform(-1, 1, 2)
    p = NeuronParams(mapping_kind="F1", c=float(c), d=float(d))
    H = rng.uniform(-1.0, 3.0, 4 * n)
    H = H[H + np.sin(H + c) + d >= 0][:n]
    got = _autodiff_step_grad(lambda st, h: neurons.alt_step(st, h, p), H)
    want = neurons.closed_form_grad(ALTERNATIVE, H, (c, d), p)
    err = float(np.max(np.abs(got - want)))
    return len(H) == n and err < ORACLE_TOL, f"max abs err {err:.2e} over {len(H)} draws"


def check_leaky_branch(seed=0, n=1000):
    # negative branch of the transfer scales the surrogate by the leaky slope
    rng = np.random.default_rng(seed + 2)
    p = NeuronParams()
    gamma = rng.uniform(p.noise_lo, p.noise_hi, n)
    H = -rng.uniform(0.01, 2.0, n) - np.maximum(gamma, 0.0)
    got = _autodiff_step_grad(lambda st, h: neurons.osc_step(st, h, p, noise=gamma), H)
    _, fprime = neurons.leaky_f(H + gamma, p)
    want = neurons.atan_surrogate(neurons.leaky_f(H + gamma, p)[0], p) * fprime
    err = float(np.max(np.abs(got - want)))
    return err < ORACLE_TOL, f"max abs err {err:.2e} over {n} draws"


def check_spontaneous_firing(seed=0, trials=10_000, steps=100):
    p = NeuronParams()
    rng = np.random.default_rng(seed)
    counts = {}
    for kind in (OSCILLATION, LIF):
        state = NeuronState.reset((trials,), p)
        total = 0.0
        for _ in range(steps):
            s, state = neurons.step(kind, state, np.zeros(trials), p, rng=rng)
            total += s.data.sum()
        counts[kind] = float(total / (trials * steps))
    ok = counts[OSCILLATION] > 0 and counts[LIF] == 0
    return ok, f"osc rate {counts[OSCILLATION]:.4f}, lif rate {counts[LIF]!r}"


# ---------------------------------------------------------------------------
# tensor ops
# ---------------------------------------------------------------------------


def _fd_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    img = rng.normal(size=(2, 2, 5, 5))
    ker = rng.normal(size=(3, 2, 3, 3))
    labels = np.array([0, 3, 1])
    stats = {"mean": np.zeros(2), "var": np.ones(2)}
    return {
        "add": (tc.add, [a, b]),
        "sub": (tc.sub, [a, b]),
        "mul": (tc.mul, [a, b]),
        "div": (tc.div, [a, pos]),
        "power": (lambda x: tc.power(x, 3.0), [a]),
        "exp": (tc.exp, [a]),
        "log": (tc.log, [pos]),
        "sin": (tc.sin, [a]),
        "cos": (tc.cos, [a]),
        "sigmoid": (tc.sigmoid, [a]),
        "broadcast_mul": (tc.mul, [a, b[:1]]),
        "sum_axis": (lambda x: tc.tsum(x * x, axis=1), [a]),
        "mean": (lambda x: tc.mean(x * x, axis=0), [a]),
        "reshape": (lambda x: tc.reshape(x, (4, 3)) * np.arange(12.0).reshape(4, 3), [a]),
        "transpose": (lambda x: tc.transpose(x) * np.arange(12.0).reshape(4, 3), [a]),
        "getitem": (lambda x: tc.getitem(x, (slice(1, 3), [0, 2, 2])) ** 2, [a]),
        "stack": (lambda x, y: tc.stack([x, y * y]), [a, b]),
        "concat": (lambda x, y: tc.concat([x * x, y], axis=1), [a, b]),
        "matmul": (lambda x, y: tc.matmul(x, tc.transpose(y)) ** 2, [a, b]),
        "conv2d": (lambda x, k: tc.conv2d(x, k, stride=1, padding=1) ** 2, [img, ker]),
        "conv2d_stride": (lambda x, k: tc.conv2d(x, k, stride=2, padding=0) ** 2, [img, ker]),
        "avg_pool2d": (lambda x: tc.avg_pool2d(x, 2) ** 2, [img[:, :, :4, :4]]),
        "batch_norm": (lambda x, g, bt: tc.batch_norm(x, g, bt, dict(stats), "train") ** 3,
                       [img, rng.uniform(0.5, 1.5, 2), rng.normal(size=2)]),
        "cross_entropy": (lambda z: tc.cross_entropy(z, labels), [a]),
    }


def check_finite_differences(seed=0):
    rng = np.random.default_rng(seed)
    worst, worst_op = 0.0, None
    bad = []
    for name, (op, arrays) in _fd_cases(rng).items():
        err = check_op(op, arrays)
        if err >= FD_TOL:
            bad.append(name)
        if err >= worst:
            worst, worst_op = err, name
    detail = f"worst rel err {worst:.1e} ({worst_op})"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return not bad, detail


# ---------------------------------------------------------------------------
# defense loss
# ---------------------------------------------------------------------------


def check_spike_loss(seed=0):
    rng = np.random.default_rng(seed)
    s = [(rng.random((4, 5, 7)) < 0.3).astype(float), (rng.random((4, 5, 3)) < 0.3).astype(float)]
    zero = spike_train_loss(s, [x.copy() for x in s]).item()
    flipped = [x.copy() for x in s]
    flipped[1][2, 0, 1] = 1 - flipped[1][2, 0, 1]
    # one mismatch contributes 0.5, averaged over the batch of 5
    one = spike_train_loss(s, flipped).item() * 5
    return zero == 0.0 and one == 0.5, f"identical={zero!r}, one mismatch x N={one!r}"


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def _attack_fixture(n, seed):
    ds = sample_subset(bundled_mnist(), n, seed)
    net = nw.build(nw.mlp_preset(hidden=64), seed=seed, neuron_kind=OSCILLATION)
    return net, ds.images, ds.labels


def check_attack_containment(seed=0, n=1000, epsilon=0.1):
    net, x, y = _attack_fixture(n, seed)
    provider = at.network_grad_provider(net, seed=seed)
    worst = 0.0
    ok = True
    for kind in at.ATTACK_KINDS:
        x_adv = at.generate(provider, x, y, at.AttackConfig(kind, epsilon, iters=3, seed=seed))
        dist = float(np.max(np.abs(x_adv - x)))
        worst = max(worst, dist)
        ok &= dist <= epsilon + 1e-12 and x_adv.min() >= 0.0 and x_adv.max() <= 1.0
    return ok, f"{len(x)} samples x {len(at.ATTACK_KINDS)} attacks, max linf {worst:.6f} (eps {epsilon})"


def check_attack_reductions(seed=0, n=200, epsilon=0.1):
    net, x, y = _attack_fixture(n, seed)
    provider = at.network_grad_provider(net, seed=seed)
    b1 = at.bim(provider, x, y, at.AttackConfig("BIM", epsilon, iters=1))
    f = at.clip_ball(at.fgsm(provider, x, y, at.AttackConfig("FGSM", epsilon)), x, epsilon)
    b3 = at.bim(provider, x, y, at.AttackConfig("BIM", epsilon, iters=3))
    m0 = at.mim(provider, x, y, at.AttackConfig("MIM", epsilon, iters=3, mim_mu=0.0))
    ok1, ok2 = np.array_equal(b1, f), np.array_equal(b3, m0)
    return ok1 and ok2, f"bim(1)==fgsm+clip: {ok1}, mim(mu=0)==bim: {ok2}"


SUITES = {
    "neurons": [("surrogate_peak", check_surrogate_peak),
                ("osc_closed_form", check_osc_closed_form),
                ("alt_closed_form", check_alt_closed_form),
                ("leaky_branch", check_leaky_branch),
                ("spontaneous_firing", check_spontaneous_firing)],
    "tensor": [("finite_differences", check_finite_differences)],
    "defense": [("spike_loss", check_spike_loss)],
    "attacks": [("containment", check_attack_containment),
                ("reductions", check_attack_reductions)],
}


def run(fault=None, suites=None, log=None) -> VerifyReport:
    report = VerifyReport()
    with inject(fault):
        for suite, checks in SUITES.items():
            if suites and suite not in suites:
                continue
            for name, fn in checks:
                start = time.perf_counter()
                try:
                    passed, detail = fn()
                except Exception as exc:  # a crashing check is a failed check
                    passed, detail = False, f"{type(exc).__name__}: {exc}"
                result = CheckResult(suite, name, bool(passed), detail, time.perf_counter() - start)
                report.results.append(result)
                if log is not None:
                    log(result)
    return report
