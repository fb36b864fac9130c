"""Command-line entry point: ``dragonfly <subcommand>``.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
Every subcommand accepts ``--format json`` for machine-readable output.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

format_option = click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text",
                             show_default=True, help="Output format.")


class StageFailure(click.ClickException):
    exit_code = EXIT_STAGE

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class ConfigFailure(click.ClickException):
    exit_code = EXIT_CONFIG


def _emit(fmt: str, payload: dict, text: str | None = None) -> None:
    if fmt == "json":
        click.echo(json.dumps(payload, indent=2, sort_keys=True, default=_default))
    else:
        click.echo(text if text is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


def _default(o):
    if isinstance(o, (np.generic,)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}", param_hint=name) from None


def _dataset(data, experiment, out: Path, seed: int = 0):
    from .geometron import DatasetError, load_dataset, synth_dataset

    if data:
        try:
            return load_dataset(data)
        except DatasetError as exc:
            raise ConfigFailure(str(exc)) from None
    return synth_dataset(experiment, seed=seed, out_dir=out / "dataset")


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    """Softlog-softmax ensemble toolkit: synthesize data, train, summarize, analyze."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--experiment", type=click.IntRange(1, 3), default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True, help="Overwrite an existing config.")
@format_option
def init(experiment, out, force, fmt):
    """Write a commented experiment config template to OUT/experiment.json."""
    from .config import template

    path = Path(out) / "experiment.json"
    if path.exists() and not force:
        raise ConfigFailure(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tpl = template(experiment, out=str(Path(out) / "run"))
    path.write_text(json.dumps(tpl, indent=2) + "\n")
    _emit(fmt, {"config": str(path)}, f"wrote {path}")


@main.command()
@click.option("--experiment", type=click.IntRange(1, 3), default=1, show_default=True)
@click.option("--counts", default="200,50,100", show_default=True, help="Per-class train,val,test sizes.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=click.IntRange(16), default=32, show_default=True)
@click.option("--previews", type=click.IntRange(0), default=4, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@format_option
def synth(experiment, counts, seed, size, previews, out, fmt):
    """Generate a geometron dataset (DFT1 shards, manifest, PGM previews)."""
    from .geometron import synth_dataset

    try:
        ds = synth_dataset(experiment, counts, seed, out, size, previews=previews)
    except ValueError as exc:
        raise ConfigFailure(str(exc)) from None
    except OSError as exc:
        raise StageFailure("synth", str(exc)) from None
    payload = {"manifest": ds.manifest_path, "classes": list(ds.classes),
               "counts": {s: int(len(ds.labels[s])) for s in ds.labels}}
    _emit(fmt, payload, f"wrote {ds.manifest_path}: classes {''.join(ds.classes)}, "
          + ", ".join(f"{s}={n}" for s, n in payload["counts"].items()))


def _train_options(f):
    for opt in reversed([
        click.option("--experiment", type=click.IntRange(1, 3), default=1, show_default=True),
        click.option("--data", type=click.Path(exists=True), default=None,
                     help="Dataset directory or manifest; synthesized at desk scale when omitted."),
        click.option("--epochs", type=click.IntRange(1), default=10, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--scale", type=float, default=0.125, show_default=True, help="Width scale."),
        click.option("--batch-size", type=click.IntRange(1), default=32, show_default=True),
        click.option("--loss", type=click.Choice(["softlog", "plain-log"]), default="softlog", show_default=True),
        click.option("--aux", is_flag=True, help="Add equal-weight losses on N13-N16."),
        click.option("--integrator", type=click.Choice(["dense", "scalar"]), default="dense", show_default=True),
        click.option("--out", type=click.Path(file_okay=False), required=True),
    ]):
        f = opt(f)
    return f


def _spec_and_config(dataset, scale, integrator, **train_kw):
    from .frustum import EnsembleSpec
    from .training import TrainConfig

    try:
        spec = EnsembleSpec(len(dataset.classes), dataset.input_dims, scale, integrator_mode=integrator)
        for b in spec.branches:
            b.channels  # validates the width scale
        cfg = TrainConfig(width_scale=scale, **train_kw)
    except ValueError as exc:
        raise ConfigFailure(str(exc)) from None
    return spec, cfg


@main.command()
@_train_options
@click.option("--lr", type=float, default=0.005, show_default=True)
@format_option
def train(experiment, data, epochs, seed, scale, batch_size, loss, aux, integrator, out, lr, fmt):
    """Train one ensemble and write its checkpoint."""
    from .frustum import Dragonfly
    from .training import TrainingDiverged, train as run_train

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _dataset(data, experiment, out)
    spec, cfg = _spec_and_config(dataset, scale, integrator, lr=lr, epochs=epochs, seed=seed,
                                 batch_size=batch_size, loss=loss, auxiliary_loss=aux)
    try:
        result = run_train(Dragonfly(spec), dataset, cfg, checkpoint_dir=out / "checkpoint")
    except TrainingDiverged as exc:
        raise StageFailure("train", str(exc)) from None
    (out / "trial.json").write_text(json.dumps(result.to_dict(), indent=2))
    payload = {"checkpoint": result.checkpoint, "epoch_loss": result.epoch_loss,
               "accuracy": result.accuracy, "wall_time": result.wall_time}
    acc = result.accuracy.get("test", {})
    _emit(fmt, payload, f"checkpoint {result.checkpoint}\nfinal epoch loss {result.epoch_loss[-1]:.4f}\n"
          f"test accuracy N17 {acc.get('N17', float('nan')):.1f}%")


@main.command()
@_train_options
@click.option("--trials", type=click.IntRange(1), default=5, show_default=True)
@click.option("--lrs", default="0.001,0.005,0.01", show_default=True)
@click.option("--workers", type=click.IntRange(1), default=None, help="Defaults to DRAGONFLY_WORKERS or 1.")
@click.option("--head", type=click.IntRange(1, 17), default=17, show_default=True)
@format_option
def montecarlo(experiment, data, epochs, seed, scale, batch_size, loss, aux, integrator, out,
               trials, lrs, workers, head, fmt):
    """Independent trials over seeds and learning rates; writes trials.json and perf CSVs."""
    from . import metrics
    from .training import monte_carlo

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _dataset(data, experiment, out)
    rates = _floats(lrs, "--lrs")
    if not rates or min(rates) <= 0:
        raise ConfigFailure("--lrs needs at least one positive learning rate")
    spec, cfg = _spec_and_config(dataset, scale, integrator, lr=rates[0], epochs=epochs, seed=seed,
                                 batch_size=batch_size, loss=loss, auxiliary_loss=aux)
    mc = monte_carlo(cfg, spec, dataset, trials, rates, workers=workers,
                     checkpoint_root=out / "checkpoints", head=head)
    (out / "trials.json").write_text(json.dumps([t.to_dict() for t in mc.trials], indent=2))
    if not mc.z():
        raise StageFailure("train", "every trial failed")
    pooled, by_lr = metrics.monte_carlo_rows(mc, experiment)
    metrics.write_csv(out / "perf.csv", pooled)
    metrics.write_csv(out / "perf_by_lr.csv", by_lr, ("lr",) + metrics.CSV_COLUMNS)
    z = mc.z()
    t = metrics.perf_tensor(z)
    payload = {"z": z, "z_by_lr": {str(k): v for k, v in mc.z_by_lr().items()},
               "perf_tensor": asdict(t), "ability": metrics.ability(t),
               "failures": [f.error for f in mc.failures], "out": str(out)}
    _emit(fmt, payload, f"N{head} Z = {[round(v, 2) for v in z]}\nperformance tensor {t}\n"
          f"ability {metrics.ability(t):.2f}\nfailed trials {len(mc.failures)}")


def _load_ckpt(checkpoint, stage):
    from .training import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(checkpoint)
    except CheckpointError as exc:
        raise StageFailure(stage, str(exc)) from None


def _ckpt_dataset(meta, data, stage):
    from .geometron import DatasetError, load_dataset

    src = data or meta.get("dataset")
    if not src:
        raise ConfigFailure("checkpoint does not record its dataset; pass --data")
    try:
        return load_dataset(src)
    except DatasetError as exc:
        raise StageFailure(stage, str(exc)) from None


@main.command(name="eval")
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@format_option
def eval_cmd(checkpoint, data, split, out, fmt):
    """Per-head accuracy and confusion matrices of a checkpoint."""
    from .training import evaluate

    graph, meta = _load_ckpt(checkpoint, "evaluate")
    dataset = _ckpt_dataset(meta, data, "evaluate")
    ev = evaluate(graph, *dataset.split(split))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"split": split, "accuracy": ev.accuracy,
               "confusion": {h: cm.tolist() for h, cm in ev.confusion.items()}}
    (out / "evaluation.json").write_text(json.dumps(payload, indent=2))
    _emit(fmt, payload, "\n".join(f"{h:>4} {a:6.2f}%" for h, a in ev.accuracy.items()))


@main.command()
@click.option("--trials", "trials_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="trials.json from montecarlo.")
@click.option("--z", "z_text", default=None, help="Comma-separated accuracies instead of --trials.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--experiment", default="1", show_default=True, help="Label for the CSV rows.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@format_option
def perf(trials_path, z_text, split, experiment, out, fmt):
    """Performance tensor and Ability of accuracy sets; writes perf.csv."""
    from . import metrics
    from .training import MonteCarloResult, TrialResult

    if (trials_path is None) == (z_text is None):
        raise ConfigFailure("pass exactly one of --trials or --z")
    out = Path(out)
    try:
        if z_text is not None:
            rows = [metrics.perf_row(experiment, "Z", _floats(z_text, "--z"))]
            by_lr = []
        else:
            trials = [TrialResult(**t) for t in json.loads(Path(trials_path).read_text())]
            rows, by_lr = metrics.monte_carlo_rows(MonteCarloResult(trials, split=split), experiment, split=split)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigFailure(f"cannot summarize: {exc}") from None
    if not rows:
        raise StageFailure("perf", "no completed trials")
    metrics.write_csv(out / "perf.csv", rows)
    if by_lr:
        metrics.write_csv(out / "perf_by_lr.csv", by_lr, ("lr",) + metrics.CSV_COLUMNS)
    _emit(fmt, {"rows": rows}, metrics.rows_to_csv(rows).rstrip())


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--bins", type=click.IntRange(2), default=20, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@format_option
def sld(checkpoint, data, split, bins, out, fmt):
    """SLD of heads N1-N16 against N17: report.csv, histograms/*.svg, failures.json."""
    from . import analysis
    from .frustum import forward_all
    from .tensor import DomainError

    graph, meta = _load_ckpt(checkpoint, "sld")
    dataset = _ckpt_dataset(meta, data, "sld")
    x, y = dataset.split(split)
    if len(y) == 0:
        raise ConfigFailure(f"split {split!r} is empty")
    try:
        probs = forward_all(graph, x)
        report = analysis.sld_report_from_probs(probs, y, split=split)
    except DomainError as exc:
        raise StageFailure("sld", str(exc)) from None
    fails = analysis.failures_from_probs(probs, y)
    files = analysis.write_sld_outputs(report, fails, out, list(dataset.classes), bins)
    _emit(fmt, {"summary": report.summary(), "failures": len(fails), "files": files},
          report.to_csv().rstrip() + f"\nfailures: {len(fails)}")


@main.command()
@click.option("--target", type=click.Choice(["layers", "ensemble", "all"]), default="all", show_default=True)
@click.option("--size", type=click.IntRange(8), default=16, show_default=True, help="Ensemble input side.")
@click.option("--scale", type=float, default=0.125, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--max-entries", type=click.IntRange(1), default=3, show_default=True,
              help="Sampled entries per ensemble parameter tensor.")
@click.option("--threshold", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@format_option
def gradcheck(target, size, scale, eps, max_entries, threshold, seed, out, fmt):
    """Central finite-difference check of layer kinds and/or the full ensemble."""
    from .gradcheck import ensemble_check, layer_suite

    reports = {}
    if target in ("layers", "all"):
        reports.update(layer_suite(seed=seed, eps=eps))
    if target in ("ensemble", "all"):
        reports["ensemble"] = ensemble_check(size=size, width_scale=scale, seed=seed, eps=eps,
                                             max_entries=max_entries)
    payload = {name: {"max_error": r.max_error, "checked": sum(r.checked.values()),
                      "passed": r.passed(threshold)} for name, r in reports.items()}
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "gradcheck.json").write_text(json.dumps(
            {k: r.to_dict() for k, r in reports.items()}, indent=2))
    _emit(fmt, payload, "\n".join(f"{'ok  ' if v['passed'] else 'FAIL'} {k:<28} max rel err {v['max_error']:.2e}"
                                  f" ({v['checked']} entries)" for k, v in payload.items()))
    if not all(v["passed"] for v in payload.values()):
        raise StageFailure("gradcheck", f"max relative error above {threshold}")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Overrides the config's out.")
@click.option("--force", is_flag=True, help="Rerun every stage even if up to date.")
@click.option("--check", is_flag=True, help="Validate and echo the normalized config only.")
@click.option("--workers", type=click.IntRange(1), default=None)
@format_option
def run(config_path, out, force, check, workers, fmt):
    """Full pipeline synth -> train -> evaluate -> perf -> sld from a config file."""
    from .config import ConfigError, validate_config
    from .pipeline import StageError, run_pipeline

    try:
        cfg = validate_config(config_path)
    except ConfigError as exc:
        if fmt == "json":
            click.echo(json.dumps({"errors": [asdict(i) for i in exc.issues]}, indent=2))
        raise ConfigFailure(str(exc)) from None
    if out:
        cfg.data["out"] = out
    if check:
        _emit(fmt, cfg.to_dict(), cfg.to_json())
        return
    try:
        res = run_pipeline(cfg, force=force, workers=workers)
    except StageError as exc:
        if fmt == "json":
            click.echo(json.dumps({"failed_stage": exc.stage, "error": str(exc.cause)}, indent=2))
        raise StageFailure(exc.stage, f"{type(exc.cause).__name__}: {exc.cause}") from None
    payload = {"out": str(res.out), "ran": res.ran, "skipped": res.skipped, "index": str(res.out / "index.json")}
    _emit(fmt, payload, f"artifacts in {res.out}\nran: {', '.join(res.ran) or '-'}\n"
          f"skipped (up to date): {', '.join(res.skipped) or '-'}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
