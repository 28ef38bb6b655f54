"""SVG plots of dS/dH curves and mapping functions.

SVG output is made byte-stable by fixing matplotlib's hash salt and
dropping the date metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import neurons  # noqa: E402
from . import tensor as tc  # noqa: E402
from .neurons import MAPPING_KINDS, NeuronParams, NeuronState  # noqa: E402
from .tensor import Tensor  # noqa: E402

H_GRID = np.linspace(-2.0, 3.0, 501)


def step_gradient(kind, H, params: NeuronParams, noise=None):
    """dS/dH of one neuron step from a zero membrane, through the autodiff tape."""
    h = Tensor(np.asarray(H, dtype=np.float64), requires_grad=True)
    state = NeuronState(np.zeros_like(h.data))
    if kind == neurons.OSCILLATION:
        s, _ = neurons.osc_step(state, h, params, noise=np.full(h.shape, float(noise)))
    else:
        s, _ = neurons.step(kind, state, h, params)
    tc.backward(s.sum(), wrt=[h])
    return h.grad


def _save(fig, path, description=None):
    metadata = {"Date": None}
    if description is not None:
        metadata["Description"] = json.dumps(description, sort_keys=True)
    with matplotlib.rc_context({"svg.hashsalt": "oscmask", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)


def gradient_curves(params: NeuronParams, path, H=H_GRID, description=None):
    """Oscillation neuron at both noise extremes, the fitted alternative neuron and LIF."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for gamma in (params.noise_lo, params.noise_hi):
        ax.plot(H, step_gradient(neurons.OSCILLATION, H, params, gamma), label=f"oscillation, noise={gamma:g}")
    ax.plot(H, step_gradient(neurons.ALTERNATIVE, H, params), "--",
            label=f"alternative {params.mapping_kind} (c={params.c:.4f}, d={params.d:.4f})")
    ax.plot(H, step_gradient(neurons.LIF, H, params), ":", label="LIF")
    ax.set_xlabel("H")
    ax.set_ylabel("dS/dH")
    ax.legend(fontsize=8)
    _save(fig, path, description)
    return Path(path)


def mapping_curves(path, c=0.0, d=0.0, H=H_GRID, description=None):
    """Value of each mapping function F1-F4 at the given ``(c, d)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in MAPPING_KINDS:
        ax.plot(H, neurons.mapping_fn(kind, H, c, d), label=kind)
    ax.set_ylim(-3, 5)
    ax.set_xlabel("H")
    ax.set_ylabel("M(H)")
    ax.set_title(f"c={c:.4f}, d={d:.4f}")
    ax.legend(fontsize=8)
    _save(fig, path, description)
    return Path(path)


def mapping_gradient_curves(params: NeuronParams, path, H=H_GRID, description=None):
    """dS/dH of the alternative neuron under each mapping, same ``(c, d)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in MAPPING_KINDS:
        p = NeuronParams(**{**params.to_dict(), "mapping_kind": kind})
        ax.plot(H, step_gradient(neurons.ALTERNATIVE, H, p), label=kind)
    ax.set_xlabel("H")
    ax.set_ylabel("dS/dH")
    ax.legend(fontsize=8)
    _save(fig, path, description)
    return Path(path)


def history_plot(history, path, description=None):
    """Training curves from a list of ``epoch, train_loss, eval_acc`` rows."""
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["train_loss"] for r in history], label="train loss")
    ax.set_xlabel("epoch")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["eval_acc"] for r in history], color="tab:orange", label="eval acc")
    ax.legend(loc="upper left", fontsize=8)
    ax2.legend(loc="upper right", fontsize=8)
    _save(fig, path, description)
    return Path(path)
