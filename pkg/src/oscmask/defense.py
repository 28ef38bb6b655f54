"""Teacher-student fitting of the deterministic neuron and the scenario harness.

A network trained with noisy oscillation neurons (the teacher) is copied with
frozen weights into a network of alternative neurons (the student), whose two
shared mapping parameters ``(c, d)`` are fitted so that every layer's spike
trains match the teacher's. The two networks then differ only in their
neuron model, so adversarial samples can be crafted with one and evaluated
on the other.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neurons
from . import tensor as tc
from .attacks import AttackConfig, generate, network_grad_provider
from .data import Dataset
from .exceptions import FitFailedError, InvalidInputError
from .network import (STREAM_INFER, Network, SampleNoise, _xy, auto_batch_size, evaluate, forward_T,
                      weights_checksum)
from .neurons import ALTERNATIVE, LIF, OSCILLATION
from .optim import Adam
from .tensor import Tensor


@dataclass
class FitConfig:
    epochs: int = 3
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    mapping_kind: str = "F1"


def spike_train_loss(teacher_spikes, student_spikes):
    """Sum over layers, timesteps and neurons of ½(S - S')², averaged over the batch.

    Arguments are per-layer lists of ``T×N×...`` arrays or tensors.
    """
    total = None
    n = None
    for s, s_prime in zip(teacher_spikes, student_spikes):
        s = s.detach() if isinstance(s, Tensor) else Tensor(s)
        s_prime = tc.as_tensor(s_prime)
        n = s.shape[1]
        diff = s - s_prime
        term = (diff * diff).sum() * 0.5
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * (1.0 / n)


def frozen_student(teacher: Network, mapping_kind="F1", c=0.0, d=0.0) -> Network:
    """Alternative-neuron copy whose weight tensors alias the teacher's arrays without grad."""
    weights = {k: v.detach() for k, v in teacher.weights.items()}
    params = neurons.NeuronParams(**{**teacher.neuron_params.to_dict(), "mapping_kind": mapping_kind,
                                     "c": float(c), "d": float(d)})
    return Network(teacher.spec, weights, ALTERNATIVE, params, teacher.bn_stats)


def _fit_set_loss(teacher, student, x, seed, batch_size, mapping=None):
    total = 0.0
    ids = np.arange(len(x))
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        _, s_t = forward_T(teacher, x[sl], SampleNoise(seed, ids[sl], (STREAM_INFER,)), record=True)
        _, s_s = forward_T(student, x[sl], None, record=True, mapping=mapping)
        total += spike_train_loss(s_t, s_s).item() * len(x[sl])
    return total / len(x)


def fit_alternative(teacher: Network, cfg: FitConfig, dataset, log=None):
    """Fit ``(c, d)`` of a weight-sharing alternative-neuron student.

    Returns ``(student, c, d, final_loss, history)``. ``history`` holds the
    mean batch loss per epoch plus the fit-set loss at ``(0, 0)``
    (``initial_loss``) and at the fitted values (``final_loss``), both
    measured against the same seeded teacher noise.
    """
    if teacher.neuron_kind != OSCILLATION:
        raise InvalidInputError(f"teacher must use oscillation neurons, got {teacher.neuron_kind!r}")
    x, _ = _xy(dataset)
    if len(x) == 0:
        raise InvalidInputError("fit set is empty")
    before = weights_checksum(teacher)
    student = frozen_student(teacher, cfg.mapping_kind)
    teacher_view = Network(teacher.spec, student.weights, OSCILLATION, teacher.neuron_params, teacher.bn_stats)
    c = Tensor(0.0, requires_grad=True)
    d = Tensor(0.0, requires_grad=True)
    opt = Adam([c, d])
    rng = np.random.default_rng(cfg.seed)
    initial = _fit_set_loss(teacher_view, student, x, cfg.seed, auto_batch_size(teacher))
    epochs = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, s_teacher = forward_T(teacher_view, x[idx], rng, record=True)
            _, s_student = forward_T(student, x[idx], None, record=True, mapping=(c, d))
            loss = spike_train_loss(s_teacher, s_student)
            value = loss.item()
            if not math.isfinite(value):
                raise FitFailedError(f"fit loss became {value} in epoch {epoch}")
            opt.zero_grad()
            tc.backward(loss, wrt=[c, d])
            opt.step(cfg.lr)
            total += value * len(idx)
        row = {"epoch": epoch, "loss": total / len(x), "c": c.item(), "d": d.item()}
        epochs.append(row)
        if log is not None:
            log(row)
    if not (math.isfinite(c.item()) and math.isfinite(d.item())):
        raise FitFailedError("fitted mapping parameters are not finite")
    student.neuron_params.c = c.item()
    student.neuron_params.d = d.item()
    final = _fit_set_loss(teacher_view, student, x, cfg.seed, auto_batch_size(teacher))
    if weights_checksum(teacher) != before:
        raise AssertionError("weights changed during fitting")
    history = {"epochs": epochs, "initial_loss": initial, "final_loss": final}
    return student, c.item(), d.item(), final, history


def _check_same_weights(a: Network, b: Network):
    if a.spec.to_dict() != b.spec.to_dict():
        raise InvalidInputError("networks have different specs")
    if weights_checksum(a) != weights_checksum(b):
        raise InvalidInputError("networks do not share weights")


def spike_agreement(net_a: Network, net_b: Network, dataset, seed=0, batch_size=None) -> float:
    """Fraction of (layer, neuron, timestep, sample) positions with equal spike bits."""
    _check_same_weights(net_a, net_b)
    x, _ = _xy(dataset)
    ids = np.arange(len(x))
    batch_size = batch_size or auto_batch_size(net_a)
    equal = total = 0
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        _, sa = forward_T(net_a, x[sl], SampleNoise(seed, ids[sl], (STREAM_INFER,)), record=True)
        _, sb = forward_T(net_b, x[sl], SampleNoise(seed, ids[sl], (STREAM_INFER,)), record=True)
        for a, b in zip(sa, sb):
            equal += int(np.sum(a.data == b.data))
            total += a.size
    return equal / total


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    id: int
    gen_kind: str
    inf_kind: str


SCENARIOS = {
    1: Scenario(1, OSCILLATION, OSCILLATION),
    2: Scenario(2, ALTERNATIVE, ALTERNATIVE),
    3: Scenario(3, LIF, OSCILLATION),
    4: Scenario(4, ALTERNATIVE, OSCILLATION),
    5: Scenario(5, OSCILLATION, ALTERNATIVE),
}
BENCHMARK = "benchmark"
CSV_FIELDS = ("scenario", "attack", "epsilon", "iters", "accuracy", "n", "seed")


def _resolve(scenario, osc_net, alt_net, lif_benchmark):
    """Return ``(generation net, inference net)`` for a scenario."""
    if scenario == BENCHMARK:
        return lif_benchmark, lif_benchmark
    if isinstance(scenario, int):
        scenario = SCENARIOS[scenario]
    # the LIF attacker sees the oscillation model's weights with noise removed
    nets = {OSCILLATION: osc_net, ALTERNATIVE: alt_net, LIF: osc_net.with_kind(LIF)}
    return nets[scenario.gen_kind], nets[scenario.inf_kind]


def _scenario_key(scenario):
    if scenario == BENCHMARK:
        return BENCHMARK
    return scenario.id if isinstance(scenario, Scenario) else int(scenario)


def _adversarial(gen_net, attack, x, y, seed, ids, stream_log):
    if attack is None:
        return x
    provider = network_grad_provider(gen_net, seed=seed, sample_ids=ids, stream_log=stream_log)
    return generate(provider, x, y, attack)


def _accuracy(inf_net, x, y, seed, ids, stream_log):
    if stream_log is not None:
        stream_log.extend((seed, int(i), STREAM_INFER) for i in ids)
    return evaluate(inf_net, (x, y), seed, sample_ids=ids)


def _row(scenario, attack, accuracy, n, seed):
    return {
        "scenario": str(_scenario_key(scenario)),
        "attack": "clean" if attack is None else attack.label,
        "epsilon": 0.0 if attack is None else float(attack.epsilon),
        "iters": 0 if attack is None else (1 if attack.kind == "FGSM" else attack.iters),
        "accuracy": float(accuracy),
        "n": int(n),
        "seed": int(seed),
    }


def run_scenario(osc_net, alt_net, lif_benchmark, scenario, attack: AttackConfig | None, eval_set, seed=0,
                 stream_log=None):
    """Accuracy of the inference model on samples crafted with the generation model.

    ``scenario`` is 1-5, a :class:`Scenario`, or ``"benchmark"`` (LIF
    network attacked and evaluated on itself). ``attack=None`` is the clean
    column.
    """
    _check_same_weights(osc_net, alt_net)
    gen_net, inf_net = _resolve(scenario, osc_net, alt_net, lif_benchmark)
    x, y = _xy(eval_set)
    ids = np.arange(len(x))
    x_adv = _adversarial(gen_net, attack, x, y, seed, ids, stream_log)
    return _row(scenario, attack, _accuracy(inf_net, x_adv, y, seed, ids, stream_log), len(y), seed)


@dataclass
class ScenarioReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def accuracy(self, scenario, attack="clean", epsilon=None):
        """Accuracy for one cell; pass ``epsilon`` when the report sweeps several."""
        key = str(_scenario_key(scenario))
        for row in self.rows:
            if row["scenario"] == key and row["attack"] == attack and (
                    epsilon is None or attack == "clean" or row["epsilon"] == epsilon):
                return row["accuracy"]
        raise KeyError((scenario, attack, epsilon))

    @property
    def attacks(self):
        return list(dict.fromkeys(r["attack"] for r in self.rows))

    @property
    def scenarios(self):
        return list(dict.fromkeys(r["scenario"] for r in self.rows))

    def to_csv(self, path=None):
        buf = io.StringIO()
        if self.config:
            buf.write("# config: " + json.dumps(self.config, sort_keys=True) + "\n")
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items() if k in CSV_FIELDS})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None):
        text = json.dumps({"config": self.config, "rows": self.rows}, indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def table(self):
        cols = list(dict.fromkeys((r["attack"], r["epsilon"]) for r in self.rows))
        sweep = len({e for a, e in cols if a != "clean"}) > 1
        names = [a if a == "clean" or not sweep else f"{a}@{e:g}" for a, e in cols]
        width = max(10, *(len(n) + 2 for n in names))
        lines = ["scenario".ljust(10) + "".join(n.rjust(width) for n in names)]
        for s in self.scenarios:
            key = s if s == BENCHMARK else int(s)
            lines.append(s.ljust(10) + "".join(f"{100 * self.accuracy(key, a, e):{width}.1f}" for a, e in cols))
        return "\n".join(lines)


def scenario_matrix(osc_net, alt_net, lif_benchmark, attacks, eval_set, seed=0, config=None, stream_log=None,
                    log=None) -> ScenarioReport:
    """Cross product of {clean, *attacks} with {benchmark, scenarios 1-5}.

    Adversarial batches depend only on the generation model, so scenarios
    sharing one (1 and 5; 2 and 4) reuse the same batch.
    """
    _check_same_weights(osc_net, alt_net)
    x, y = _xy(eval_set)
    ids = np.arange(len(x))
    report = ScenarioReport(config=dict(config or {}))
    report.config.setdefault("seed", seed)
    report.config.setdefault("n", len(y))
    cache = {}
    for scenario in [BENCHMARK, *SCENARIOS.values()]:
        gen_net, inf_net = _resolve(scenario, osc_net, alt_net, lif_benchmark)
        gen_key = BENCHMARK if scenario == BENCHMARK else scenario.gen_kind
        for attack in [None, *attacks]:
            key = (gen_key, None if attack is None else json.dumps(attack.to_dict(), sort_keys=True))
            if key not in cache:
                cache[key] = _adversarial(gen_net, attack, x, y, seed, ids, stream_log)
            acc = _accuracy(inf_net, cache[key], y, seed, ids, stream_log)
            row = _row(scenario, attack, acc, len(y), seed)
            report.rows.append(row)
            if log is not None:
                log(row)
    return report


def report_from_dict(d) -> ScenarioReport:
    return ScenarioReport(rows=list(d["rows"]), config=dict(d.get("config", {})))


def dataset_of(x, y, num_classes=10, name="adversarial") -> Dataset:
    return Dataset(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64), name, num_classes)


def config_snapshot(**parts):
    """JSON-safe dict of dataclass configs for embedding in artifacts."""
    out = {}
    for key, value in parts.items():
        if hasattr(value, "__dataclass_fields__"):
            value = asdict(value)
        out[key] = value
    return out
