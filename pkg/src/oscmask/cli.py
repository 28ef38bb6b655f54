"""Command line entry point: ``oscmask train | fit | attack | scenarios | verify | plot``.

Exit codes: 1 pipeline error or failed verification, 2 missing input file,
3 checkpoint of the wrong neuron kind, 4 checkpoints whose weights differ.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import attacks as at
from . import data
from . import network as nw
from . import plotting
from . import verify as verify_mod
from .config import ExperimentConfig, load_config
from .defense import fit_alternative, scenario_matrix, spike_agreement
from .exceptions import OscMaskError
from .neurons import ALTERNATIVE, LIF, NEURON_KINDS, OSCILLATION

EXIT_FAILURE = 1
EXIT_MISSING = 2
EXIT_WRONG_KIND = 3
EXIT_MISMATCH = 4


class CliExit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _guarded(fn):
    """Map pipeline exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CliExit as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except FileNotFoundError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MISSING)
        except OscMaskError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_FAILURE)

    return wrapper


def _config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML experiment config.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key, e.g. --set train.epochs=5 (repeatable).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the top-level seed.")(fn)
    fn = click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Overrides output_dir.")(fn)
    fn = click.option("--workers", type=int, default=None, help="Upper bound on BLAS threads.")(fn)
    return fn


def _resolve_config(config_path, overrides, seed, out_dir, workers) -> ExperimentConfig:
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(f"config not found: {config_path}")
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    if out_dir is not None:
        overrides.append(f"output_dir={json.dumps(out_dir)}")
    if workers is not None:
        overrides.append(f"workers={workers}")
    return load_config(config_path, overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_line(cfg: ExperimentConfig) -> str:
    return "# config: " + json.dumps(cfg.snapshot(), sort_keys=True) + "\n"


def _write_csv(path, cfg, fields, rows):
    buf = io.StringIO()
    buf.write(_config_line(cfg))
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items() if k in fields})
    Path(path).write_text(buf.getvalue())


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _find(directory: Path, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"dataset not found: {directory / stem}")


def _resolve_path(p):
    path = Path(p)
    return path if path.is_absolute() or path.exists() else data.default_data_dir() / path


def load_datasets(cfg: ExperimentConfig):
    """Return ``(train, eval)`` as described by the ``dataset`` section."""
    ds = cfg.dataset
    root = data.default_data_dir()
    held_out = None
    if ds.name == "mnist10k":
        full = data.bundled_mnist()
    elif ds.name == "mnist":
        if ds.images or ds.labels:
            if not (ds.images and ds.labels):
                raise OscMaskError("dataset.images and dataset.labels must be given together")
            full = data.load_idx(_resolve_path(ds.images), _resolve_path(ds.labels), "mnist")
        else:
            full = data.load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
            held_out = data.load_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    else:
        if ds.paths:
            full = data.load_cifar10_bin([_resolve_path(p) for p in ds.paths])
        else:
            base = root / "cifar-10-batches-bin"
            full = data.load_cifar10_bin([_find(base, f"data_batch_{i}.bin") for i in range(1, 6)])
            held_out = data.load_cifar10_bin([_find(base, "test_batch.bin")])
    if held_out is None:
        train, evalset = data.split(full, ds.eval_size, ds.seed)
    else:
        train, evalset = full, data.sample_subset(held_out, ds.eval_size, ds.seed)
    if ds.train_size is not None:
        train = data.sample_subset(train, ds.train_size, ds.seed)
    return train, evalset


def _build_spec(cfg: ExperimentConfig, train: data.Dataset):
    n = cfg.network
    shape = train.sample_shape
    if n.preset == "mlp":
        return nw.mlp_preset(shape, n.hidden, train.num_classes, n.timesteps, n.dropout)
    return nw.cnn_preset(shape, train.num_classes, n.timesteps, n.dropout)


def _load_checkpoint(path, kind=None, role="checkpoint"):
    net = nw.load(path)
    if kind is not None and net.neuron_kind != kind:
        raise CliExit(EXIT_WRONG_KIND, f"{role} {path} uses {net.neuron_kind!r} neurons, expected {kind!r}")
    return net


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group()
def main():
    """Gradient-masking defense for spiking networks via oscillation neurons."""


HISTORY_FIELDS = ("model", "epoch", "lr", "train_loss", "eval_acc")


@main.command()
@_config_options
@click.option("--only", type=click.Choice([OSCILLATION, LIF]), default=None, help="Train just one of the two models.")
@_guarded
def train(config_path, overrides, seed, out_dir, workers, only):
    """Train the oscillation teacher and the LIF benchmark."""
    cfg = _resolve_config(config_path, overrides, seed, out_dir, workers)
    train_set, eval_set = load_datasets(cfg)
    out = _out_dir(cfg)
    rows = []
    with threadpool_limits(cfg.workers):
        for kind in (OSCILLATION, LIF):
            if only and kind != only:
                continue
            tcfg = cfg.train_config()
            net = nw.build(_build_spec(cfg, train_set), seed=tcfg.seed, neuron_kind=kind,
                           neuron_params=cfg.neuron_params())

            def log(row, kind=kind):
                click.echo(f"[{kind}] epoch {row['epoch']:3d}  lr {row['lr']:.2e}  "
                           f"loss {row['train_loss']:.4f}  eval acc {row['eval_acc']:.4f}")

            _, history = nw.train(net, train_set, tcfg, eval_set=eval_set, eval_seed=cfg.seed, log=log)
            rows += [{"model": kind, **r} for r in history]
            path = out / ("osc.ckpt" if kind == OSCILLATION else "lif.ckpt")
            nw.save(net, path, config=cfg.snapshot())
            click.echo(f"wrote {path}")
    _write_csv(out / "history.csv", cfg, HISTORY_FIELDS, rows)
    click.echo(f"wrote {out / 'history.csv'}")


FIT_FIELDS = ("epoch", "loss", "c", "d")


@main.command()
@_config_options
@click.option("--teacher", type=click.Path(dir_okay=False), required=True, help="Oscillation checkpoint.")
@_guarded
def fit(config_path, overrides, seed, out_dir, workers, teacher):
    """Fit (c, d) of the alternative neuron against a trained oscillation teacher."""
    cfg = _resolve_config(config_path, overrides, seed, out_dir, workers)
    if not 1 <= cfg.fit.epochs <= 3:
        click.echo(f"warning: fit.epochs={cfg.fit.epochs} is outside the usual 1-3 range; proceeding", err=True)
    teacher_net = _load_checkpoint(teacher, OSCILLATION, "teacher")
    train_set, eval_set = load_datasets(cfg)
    if cfg.fit.fit_size is not None:
        train_set = data.sample_subset(train_set, cfg.fit.fit_size, cfg.dataset.seed)
    out = _out_dir(cfg)
    fcfg = cfg.fit_config()

    def log(row):
        click.echo(f"epoch {row['epoch']}  loss {row['loss']:.4f}  c {row['c']:+.4f}  d {row['d']:+.4f}")

    with threadpool_limits(cfg.workers):
        student, c, d, final, history = fit_alternative(teacher_net, fcfg, train_set, log=log)
        agreement = spike_agreement(teacher_net, student, eval_set, cfg.seed)
        acc_osc = nw.evaluate(teacher_net, eval_set, cfg.seed)
        acc_alt = nw.evaluate(student, eval_set, cfg.seed)
    summary = {"config": cfg.snapshot(), "c": c, "d": d, "initial_loss": history["initial_loss"],
               "final_loss": final, "spike_agreement": agreement, "eval_acc_oscillation": acc_osc,
               "eval_acc_alternative": acc_alt, "teacher_checksum": nw.weights_checksum(teacher_net)}
    nw.save(student, out / "alt.ckpt", config=cfg.snapshot())
    _write_csv(out / "fit_log.csv", cfg, FIT_FIELDS, history["epochs"])
    _write_json(out / "fit.json", summary)
    click.echo(f"c={c:.4f} d={d:.4f}  loss {history['initial_loss']:.4f} -> {final:.4f}  "
               f"agreement {agreement:.4f}  acc osc {acc_osc:.4f} alt {acc_alt:.4f}")
    click.echo(f"wrote {out / 'alt.ckpt'}")


ATTACK_FIELDS = ("attack", "epsilon", "iters", "gen_kind", "clean_acc", "adv_acc", "max_linf", "n", "seed")


@main.command()
@_config_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="Model to attack.")
@click.option("--gen-kind", type=click.Choice(NEURON_KINDS), default=None,
              help="Neuron kind used for gradients (default: the checkpoint's own).")
@click.option("--attack", "attack_kind", type=click.Choice(at.ATTACK_KINDS, case_sensitive=False), default=None,
              help="Run only this attack instead of the config's list.")
@click.option("--epsilon", type=float, default=None, help="Overrides every attack's epsilon.")
@_guarded
def attack(config_path, overrides, seed, out_dir, workers, checkpoint, gen_kind, attack_kind, epsilon):
    """Craft adversarial samples for the eval set and measure accuracy on them."""
    cfg = _resolve_config(config_path, overrides, seed, out_dir, workers)
    attacks = cfg.attack_configs()
    if attack_kind:
        base = next((a for a in attacks if a.kind == attack_kind.upper()), None)
        eps = epsilon if epsilon is not None else (base.epsilon if base else 0.1)
        iters = base.iters if base else 5
        attacks = [at.AttackConfig(attack_kind.upper(), eps, iters, seed=cfg.seed)]
    elif epsilon is not None:
        attacks = [at.AttackConfig(a.kind, epsilon, a.iters, a.mim_mu, None, a.seed) for a in attacks]
    net = _load_checkpoint(checkpoint)
    gen_net = net if gen_kind is None else net.with_kind(gen_kind)
    _, eval_set = load_datasets(cfg)
    out = _out_dir(cfg)
    x, y = eval_set.images, eval_set.labels
    rows = []
    with threadpool_limits(cfg.workers):
        clean = nw.evaluate(net, eval_set, cfg.seed)
        for acfg in attacks:
            provider = at.network_grad_provider(gen_net, seed=cfg.seed)
            x_adv = at.generate(provider, x, y, acfg)
            adv = nw.evaluate(net, (x_adv, y), cfg.seed)
            tag = f"adv_{acfg.label}_eps{acfg.epsilon:g}"
            at.save_adversarial(x_adv, out / tag, {"config": cfg.snapshot(), "attack": acfg.to_dict(),
                                                   "checkpoint": str(checkpoint), "gen_kind": gen_net.neuron_kind,
                                                   "source_indices": eval_set.source_index.tolist(),
                                                   "weights_sha256": nw.weights_checksum(net)})
            rows.append({"attack": acfg.label, "epsilon": float(acfg.epsilon),
                         "iters": 1 if acfg.kind == "FGSM" else acfg.iters, "gen_kind": gen_net.neuron_kind,
                         "clean_acc": clean, "adv_acc": adv, "max_linf": float(np.max(np.abs(x_adv - x))),
                         "n": len(y), "seed": cfg.seed})
            click.echo(f"{acfg.label:8s} eps {acfg.epsilon:.4f}  clean {clean:.4f}  adversarial {adv:.4f}")
    _write_csv(out / "attack.csv", cfg, ATTACK_FIELDS, rows)
    click.echo(f"wrote {out / 'attack.csv'}")


@main.command()
@_config_options
@click.option("--osc", "osc_path", type=click.Path(dir_okay=False), required=True)
@click.option("--alt", "alt_path", type=click.Path(dir_okay=False), required=True)
@click.option("--lif", "lif_path", type=click.Path(dir_okay=False), required=True)
@_guarded
def scenarios(config_path, overrides, seed, out_dir, workers, osc_path, alt_path, lif_path):
    """Accuracy matrix of the benchmark and the five attack scenarios."""
    cfg = _resolve_config(config_path, overrides, seed, out_dir, workers)
    osc = _load_checkpoint(osc_path, OSCILLATION, "--osc")
    alt = _load_checkpoint(alt_path, ALTERNATIVE, "--alt")
    lif = _load_checkpoint(lif_path, LIF, "--lif")
    if osc.spec.to_dict() != alt.spec.to_dict() or nw.weights_checksum(osc) != nw.weights_checksum(alt):
        raise CliExit(EXIT_MISMATCH, f"{alt_path} does not share weights with {osc_path}")
    _, eval_set = load_datasets(cfg)
    out = _out_dir(cfg)
    snapshot = cfg.snapshot()
    snapshot["mapping"] = {"kind": alt.neuron_params.mapping_kind, "c": alt.neuron_params.c,
                           "d": alt.neuron_params.d}

    def log(row):
        click.echo(f"scenario {row['scenario']:>9s}  {row['attack']:8s}  acc {row['accuracy']:.4f}")

    with threadpool_limits(cfg.workers):
        report = scenario_matrix(osc, alt, lif, cfg.attack_configs(), eval_set, cfg.seed, snapshot, log=log)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    plotting.gradient_curves(alt.neuron_params, out / "gradient_curves.svg", description=snapshot)
    plotting.mapping_gradient_curves(alt.neuron_params, out / "mapping_gradients.svg", description=snapshot)
    click.echo(report.table())
    click.echo(f"wrote {out / 'report.csv'}")


@main.command()
@click.option("--fault", type=click.Choice(verify_mod.FAULTS), default=None, help="Inject a known fault.")
@click.option("--suite", "suites", multiple=True, type=click.Choice(list(verify_mod.SUITES)),
              help="Run only these suites (repeatable).")
@click.option("--workers", type=int, default=1)
def verify(fault, suites, workers):
    """Run the invariant suites and print a pass/fail table."""
    with threadpool_limits(workers):
        report = verify_mod.run(fault=fault, suites=suites)
    click.echo(report.table())
    if not report.passed:
        click.echo("FAILED: " + ", ".join(report.failed), err=True)
        sys.exit(EXIT_FAILURE)
    click.echo(f"all {len(report.results)} checks passed")


@main.command()
@_config_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Alternative-neuron checkpoint supplying (c, d); defaults to c=d=0.")
@click.option("--history", "history_path", type=click.Path(dir_okay=False), default=None,
              help="history.csv from `train` to plot as well.")
@_guarded
def plot(config_path, overrides, seed, out_dir, workers, checkpoint, history_path):
    """Render dS/dH curves, mapping functions and (optionally) training curves as SVG."""
    cfg = _resolve_config(config_path, overrides, seed, out_dir, workers)
    params = cfg.neuron_params(mapping_kind=cfg.fit.mapping_kind)
    if checkpoint is not None:
        params = _load_checkpoint(checkpoint, ALTERNATIVE, "--checkpoint").neuron_params
    out = _out_dir(cfg)
    snapshot = cfg.snapshot()
    written = [
        plotting.gradient_curves(params, out / "gradient_curves.svg", description=snapshot),
        plotting.mapping_curves(out / "mapping_functions.svg", params.c, params.d, description=snapshot),
        plotting.mapping_gradient_curves(params, out / "mapping_gradients.svg", description=snapshot),
    ]
    if history_path is not None:
        if not Path(history_path).exists():
            raise FileNotFoundError(f"history not found: {history_path}")
        lines = [ln for ln in Path(history_path).read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        for model in dict.fromkeys(r["model"] for r in rows):
            hist = [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                     "eval_acc": float(r["eval_acc"])} for r in rows if r["model"] == model]
            written.append(plotting.history_plot(hist, out / f"history_{model}.svg", description=snapshot))
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
