"""Layered spiking networks unrolled over T timesteps.

The analog image is injected as a constant input current at every timestep.
Stateless layers are applied to all timesteps at once (time folded into the
batch axis), so batch norm statistics pool over batch and time jointly.
Layers ahead of the first spiking layer see a time-constant input and are
evaluated only once.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neurons
from . import tensor as tc
from .data import Dataset
from .exceptions import (FormatError, InvalidInputError, InvalidParameterError,
                         SpecError, TrainingDivergedError)
from .neurons import NEURON_KINDS, NeuronParams, NeuronState
from .optim import Adam, cosine_lr
from .tensor import Tensor

LAYER_DEFAULTS = {
    "conv2d": {"out_channels": None, "kernel": None, "stride": 1, "pad": 0},
    "dense": {"out_features": None},
    "avg_pool": {"window": 2, "stride": None},
    "batch_norm": {},
    "dropout": {"p": 0.5},
    "spiking": {},
}

# RNG stream tags, mixed into per-sample seeds.
STREAM_GENERATE = 1
STREAM_INFER = 2


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    num_classes: int
    timesteps: int = 8

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        normalized = []
        for i, layer in enumerate(self.layers):
            layer = dict(layer)
            kind = layer.pop("type", None)
            if kind not in LAYER_DEFAULTS:
                raise SpecError(f"layer {i}: unknown layer type {kind!r}")
            unknown = set(layer) - set(LAYER_DEFAULTS[kind])
            if unknown:
                raise SpecError(f"layer {i} ({kind}): unknown keys {sorted(unknown)}")
            full = {"type": kind, **LAYER_DEFAULTS[kind], **layer}
            missing = [k for k, v in full.items() if v is None and not (kind == "avg_pool" and k == "stride")]
            if missing:
                raise SpecError(f"layer {i} ({kind}): missing {missing}")
            normalized.append(full)
        self.layers = normalized
        if self.timesteps < 1:
            raise SpecError(f"timesteps must be positive, got {self.timesteps}")
        self.shapes = self._infer_shapes()

    def _infer_shapes(self):
        """Static shape chain; ``shapes[i]`` is the per-sample output of layer i."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv2d":
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (conv2d): needs C×H×W input, got {shape}")
                k, s, p = layer["kernel"], layer["stride"], layer["pad"]
                if k > shape[1] + 2 * p or k > shape[2] + 2 * p:
                    raise SpecError(f"layer {i} (conv2d): kernel {k} larger than padded input {shape}")
                shape = (layer["out_channels"], (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
            elif kind == "avg_pool":
                w = layer["window"]
                s = layer["stride"] or w
                if len(shape) != 3 or w > shape[1] or w > shape[2]:
                    raise SpecError(f"layer {i} (avg_pool): window {w} does not fit input {shape}")
                shape = (shape[0], (shape[1] - w) // s + 1, (shape[2] - w) // s + 1)
            elif kind == "dense":
                shape = (layer["out_features"],)
            elif kind == "dropout" and not 0 <= layer["p"] < 1:
                raise SpecError(f"layer {i} (dropout): p must lie in [0, 1)")
            shapes.append(shape)
        if not self.layers or self.layers[-1]["type"] != "spiking":
            raise SpecError("the final layer must be a spiking layer")
        if shapes[-1] != (self.num_classes,):
            raise SpecError(f"final layer produces {shapes[-1]}, expected ({self.num_classes},)")
        return shapes

    def fan_in(self, i):
        prev = self.input_shape if i == 0 else self.shapes[i - 1]
        layer = self.layers[i]
        if layer["type"] == "conv2d":
            return prev[0] * layer["kernel"] ** 2
        return int(np.prod(prev))

    def to_dict(self):
        return {"layers": [dict(layer) for layer in self.layers], "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "timesteps": self.timesteps}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=d["layers"], input_shape=tuple(d["input_shape"]),
                   num_classes=d["num_classes"], timesteps=d.get("timesteps", 8))


def mlp_preset(input_shape=(1, 28, 28), hidden=256, num_classes=10, timesteps=8, dropout=0.5):
    layers = [{"type": "dense", "out_features": hidden}, {"type": "spiking"}]
    if dropout:
        layers.append({"type": "dropout", "p": dropout})
    layers += [{"type": "dense", "out_features": num_classes}, {"type": "spiking"}]
    return NetworkSpec(layers, input_shape, num_classes, timesteps)


def cnn_preset(input_shape=(1, 28, 28), num_classes=10, timesteps=8, dropout=0.5):
    layers = [
        {"type": "conv2d", "out_channels": 16, "kernel": 5},
        {"type": "batch_norm"},
        {"type": "spiking"},
        {"type": "avg_pool", "window": 2},
        {"type": "conv2d", "out_channels": 32, "kernel": 5},
        {"type": "batch_norm"},
        {"type": "spiking"},
        {"type": "avg_pool", "window": 2},
    ]
    if dropout:
        layers.append({"type": "dropout", "p": dropout})
    layers += [{"type": "dense", "out_features": num_classes}, {"type": "spiking"}]
    return NetworkSpec(layers, input_shape, num_classes, timesteps)


PRESETS = {"mlp": mlp_preset, "cnn": cnn_preset}


@dataclass
class Network:
    spec: NetworkSpec
    weights: dict
    neuron_kind: str = neurons.LIF
    neuron_params: NeuronParams = field(default_factory=NeuronParams)
    bn_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.neuron_kind not in NEURON_KINDS:
            raise InvalidParameterError(f"unknown neuron kind {self.neuron_kind!r}")

    def with_kind(self, kind, **param_updates) -> "Network":
        """A view with another neuron kind that shares weight tensors and BN stats."""
        params = NeuronParams(**{**self.neuron_params.to_dict(), **param_updates})
        return Network(self.spec, self.weights, kind, params, self.bn_stats)

    def copy(self) -> "Network":
        weights = {k: Tensor(v.data.copy()) for k, v in self.weights.items()}
        return Network(self.spec, weights, self.neuron_kind, copy.deepcopy(self.neuron_params),
                       copy.deepcopy(self.bn_stats))

    def parameters(self):
        return [self.weights[k] for k in sorted(self.weights)]

    def checksum(self):
        return weights_checksum(self)

    def forward(self, x, rng=None, **kwargs):
        return forward_T(self, x, rng, **kwargs)


def weights_checksum(net: Network) -> str:
    h = hashlib.sha256()
    for name in sorted(net.weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(net.weights[name].data, dtype="<f8").tobytes())
    for i in sorted(net.bn_stats):
        for key in ("mean", "var"):
            h.update(np.ascontiguousarray(net.bn_stats[i][key], dtype="<f8").tobytes())
    return h.hexdigest()


def build(spec: NetworkSpec, seed=0, neuron_kind=neurons.LIF, neuron_params=None) -> Network:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)); no biases; BN gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    weights, bn_stats = {}, {}
    prev = spec.input_shape
    for i, layer in enumerate(spec.layers):
        kind = layer["type"]
        if kind in ("dense", "conv2d"):
            bound = math.sqrt(6.0 / spec.fan_in(i))
            if kind == "dense":
                shape = (int(np.prod(prev)), layer["out_features"])
            else:
                shape = (layer["out_channels"], prev[0], layer["kernel"], layer["kernel"])
            weights[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        elif kind == "batch_norm":
            ch = prev[0]
            weights[f"{i}.gamma"] = Tensor(np.ones(ch), requires_grad=True)
            weights[f"{i}.beta"] = Tensor(np.zeros(ch), requires_grad=True)
            bn_stats[i] = {"mean": np.zeros(ch), "var": np.ones(ch)}
        prev = spec.shapes[i]
    return Network(spec, weights, neuron_kind, neuron_params or NeuronParams(), bn_stats)


# ---------------------------------------------------------------------------
# Noise sources
# ---------------------------------------------------------------------------


class SampleNoise:
    """Per-sample noise streams keyed by ``(seed, sample_id, *stream)``.

    Draws for a sample do not depend on which other samples share its batch.
    """

    def __init__(self, seed, sample_ids, stream=()):
        self.key = (int(seed), tuple(int(s) for s in stream))
        self.sample_ids = [int(i) for i in sample_ids]
        self._gens = [np.random.default_rng([int(seed), i, *self.key[1]]) for i in self.sample_ids]

    def uniform(self, low, high, size):
        size = tuple(size)
        if size[0] != len(self._gens):
            raise InvalidInputError(f"noise requested for batch {size[0]} but stream covers {len(self._gens)} samples")
        return np.stack([g.uniform(low, high, size[1:]) for g in self._gens])

    def random(self, size):
        size = tuple(size)
        return np.stack([g.random(size[1:]) for g in self._gens])


def _as_noise(rng):
    if rng is None or hasattr(rng, "uniform"):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _check_input(net, x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.shape[1:] != net.spec.input_shape:
        raise InvalidInputError(f"input samples have shape {data.shape[1:]}, network expects {net.spec.input_shape}")
    if data.size and (data.min() < -1e-9 or data.max() > 1 + 1e-9):
        raise InvalidInputError("input values must lie in [0, 1]")


def _stateless(layer, i, h, net, training, rng):
    kind = layer["type"]
    if kind == "dense":
        return tc.matmul(h.reshape(h.shape[0], -1), net.weights[f"{i}.weight"])
    if kind == "conv2d":
        return tc.conv2d(h, net.weights[f"{i}.weight"], layer["stride"], layer["pad"])
    if kind == "avg_pool":
        return tc.avg_pool2d(h, layer["window"], layer["stride"])
    if kind == "batch_norm":
        return tc.batch_norm(h, net.weights[f"{i}.gamma"], net.weights[f"{i}.beta"], net.bn_stats[i],
                             "train" if training else "eval")
    raise AssertionError(kind)


def forward_T(net: Network, x, rng=None, *, kind=None, training=False, record=False, mapping=None):
    """Run the network over ``spec.timesteps`` steps.

    Returns ``(rates, spike_record)`` where ``rates`` is the ``N×K`` mean
    output spike count per timestep and ``spike_record`` is a list with one
    ``T×N×...`` spike tensor per spiking layer (empty unless ``record``).

    ``rng`` feeds oscillation noise and dropout masks: a seed, a numpy
    Generator, or a :class:`SampleNoise`. ``mapping`` optionally overrides
    ``(c, d)`` of the alternative neuron with (possibly grad-tracked) tensors.
    """
    kind = kind or net.neuron_kind
    if kind not in NEURON_KINDS:
        raise InvalidParameterError(f"unknown neuron kind {kind!r}")
    _check_input(net, x)
    rng = _as_noise(rng)
    if kind == neurons.OSCILLATION and rng is None:
        raise InvalidParameterError("the oscillation neuron needs an rng")
    h = tc.as_tensor(x)
    n = h.shape[0]
    T = net.spec.timesteps
    params = net.neuron_params
    static = True
    spikes = []
    for i, layer in enumerate(net.spec.layers):
        typ = layer["type"]
        if typ == "spiking":
            state = NeuronState.reset((n,) + net.spec.shapes[i], params)
            outs = []
            for t in range(T):
                current = h if static else h[t]
                s, state = neurons.step(kind, state, current, params, rng=rng, mapping=mapping)
                outs.append(s)
            h = tc.stack(outs)
            static = False
            if record:
                spikes.append(h)
        elif typ == "dropout":
            if training and layer["p"] > 0:
                mask_shape = (n,) + (net.spec.shapes[i])
                if rng is None:
                    raise InvalidParameterError("training with dropout needs an rng")
                keep = rng.random(mask_shape) >= layer["p"]
                h = h * (keep / (1.0 - layer["p"]))
        elif static:
            h = _stateless(layer, i, h, net, training, rng)
        else:
            folded = h.reshape((T * n,) + h.shape[2:])
            out = _stateless(layer, i, folded, net, training, rng)
            h = out.reshape((T, n) + out.shape[1:])
    return h.mean(axis=0), spikes


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    lr0: float = 1e-4
    t_max: int = 100
    batch_size: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr0 > 0:
            raise InvalidParameterError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")


def _xy(dataset):
    if isinstance(dataset, Dataset):
        return dataset.images, dataset.labels
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def train(net: Network, dataset, cfg: TrainConfig, eval_set=None, eval_seed=0, log=None):
    """Surrogate-gradient BPTT with Adam and per-epoch cosine annealing.

    Returns ``(net, history)``; ``history`` has one dict per epoch with keys
    ``epoch, lr, train_loss, eval_acc``. Accuracy is measured on ``eval_set``
    when given, otherwise on the training data.
    """
    x, y = _xy(dataset)
    if len(y) == 0:
        raise InvalidInputError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), cfg.betas, cfg.eps)
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.lr0, cfg.t_max)
        order = rng.permutation(len(y))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            rates, _ = forward_T(net, x[idx], rng, training=True)
            loss = tc.cross_entropy(rates, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step, value)
            opt.zero_grad()
            tc.backward(loss)
            opt.step(lr)
            total += value * len(idx)
            count += len(idx)
        acc = evaluate(net, eval_set if eval_set is not None else dataset, eval_seed)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count, "eval_acc": acc}
        history.append(row)
        if log is not None:
            log(row)
    return net, history


ACTIVATION_BUDGET = 2e7  # float64 elements held by the largest per-batch buffer


def auto_batch_size(net: Network, cap=500):
    """Largest batch whose biggest activation (conv patches included) fits the budget."""
    T = net.spec.timesteps
    worst = 1
    prev = net.spec.input_shape
    for i, layer in enumerate(net.spec.layers):
        out = net.spec.shapes[i]
        size = int(np.prod(out))
        if layer["type"] == "conv2d":
            size = out[1] * out[2] * prev[0] * layer["kernel"] ** 2
        worst = max(worst, size * T)
        prev = out
    return int(max(1, min(cap, ACTIVATION_BUDGET // worst)))


def predict_rates(net: Network, x, seed=0, *, kind=None, stream=(STREAM_INFER,), sample_ids=None,
                  batch_size=None, mapping=None):
    """Output rates without gradient recording, one seeded noise stream per sample."""
    x = np.asarray(x, dtype=np.float64)
    batch_size = batch_size or auto_batch_size(net)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    out = []
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        noise = SampleNoise(seed, ids[sl], stream)
        rates, _ = forward_T(net, x[sl], noise, kind=kind, mapping=mapping)
        out.append(rates.data)
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))


def evaluate(net: Network, dataset, seed=0, *, kind=None, sample_ids=None, batch_size=None) -> float:
    """Top-1 accuracy of argmax over output rates."""
    x, y = _xy(dataset)
    if len(y) == 0:
        raise InvalidInputError("evaluation set is empty")
    rates = predict_rates(net, x, seed, kind=kind, sample_ids=sample_ids, batch_size=batch_size)
    return float(np.mean(rates.argmax(axis=1) == y))


def input_gradient(net: Network, x, y, kind=None, rng=None, mapping=None):
    """d(mean cross-entropy of the output rates)/dx through all T timesteps."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    rates, _ = forward_T(net, xt, rng, kind=kind, mapping=mapping)
    loss = tc.cross_entropy(rates, np.asarray(y, dtype=np.int64))
    tc.backward(loss, wrt=[xt])
    return xt.grad


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"OSCMASK\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save(net: Network, path, config=None):
    """Binary container: magic, version, JSON header length, JSON header, raw ``<f8`` blobs."""
    blobs, index, offset = [], [], 0
    arrays = [(name, net.weights[name].data) for name in sorted(net.weights)]
    for i in sorted(net.bn_stats):
        arrays += [(f"bn.{i}.mean", net.bn_stats[i]["mean"]), (f"bn.{i}.var", net.bn_stats[i]["var"])]
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "neuron_kind": net.neuron_kind,
        "neuron_params": net.neuron_params.to_dict(),
        "tensors": index,
        "payload_crc32": zlib.crc32(payload),
        "config": config,
    }
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + payload)


def read_header(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    end = _PREFIX.size + head_len
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:end])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    return header, raw[end:]


def load(path) -> Network:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, payload = read_header(path)
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    arrays = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    weights, bn_stats = {}, {}
    for name, arr in arrays.items():
        if name.startswith("bn."):
            _, i, key = name.split(".")
            bn_stats.setdefault(int(i), {})[key] = arr
        else:
            weights[name] = Tensor(arr, requires_grad=True)
    spec = NetworkSpec.from_dict(header["spec"])
    return Network(spec, weights, header["neuron_kind"], NeuronParams.from_dict(header["neuron_params"]), bn_stats)
