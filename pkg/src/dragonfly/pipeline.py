"""End-to-end orchestration: synth -> train -> evaluate -> perf -> sld.

Each stage records a content key (config section plus upstream digests) in
``stages.json``; a rerun skips stages whose key and outputs are unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, metrics
from .config import ExperimentConfig
from .frustum import forward_all
from .geometron import load_dataset, synth_dataset
from .training import (
    MonteCarloResult,
    TrialResult,
    default_workers,
    evaluate,
    load_checkpoint,
    monte_carlo,
)

log = logging.getLogger(__name__)

STAGES = ("synth", "train", "evaluate", "perf", "sld")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@dataclass
class PipelineResult:
    out: Path
    index: dict
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(str(p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


class _Ledger:
    def __init__(self, out: Path):
        self.path = out / "stages.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}

    def fresh(self, stage: str, key: str) -> bool:
        rec = self.data.get(stage)
        return bool(rec and rec["key"] == key and all((self.path.parent / f).exists() for f in rec["outputs"]))

    def record(self, stage: str, key: str, outputs: list[str]) -> None:
        self.data[stage] = {"key": key, "outputs": outputs, "time": time.time()}
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _rel(out: Path, paths) -> list[str]:
    return [str(Path(p).relative_to(out)) for p in paths]


def _trial_from_dict(d: dict) -> TrialResult:
    return TrialResult(**d)


def run_pipeline(cfg: ExperimentConfig, out=None, force: bool = False, workers: int | None = None) -> PipelineResult:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    ledger = _Ledger(out)
    result = PipelineResult(out, {})
    d = cfg.data

    def stage(name, key, fn):
        if not force and ledger.fresh(name, key):
            result.skipped.append(name)
            log.info("stage %s: up to date", name)
            return
        log.info("stage %s: running", name)
        try:
            outputs = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        ledger.record(name, key, _rel(out, outputs))
        result.ran.append(name)

    # synth -----------------------------------------------------------------
    data_dir = out / "dataset"
    synth_key = _key("synth", d["experiment"], d["dataset"])

    def do_synth():
        ds = d["dataset"]
        synth_dataset(d["experiment"], ds["counts"], ds["seed"], data_dir, ds["size"], cfg.jitter(),
                      previews=ds["previews"])
        return [data_dir / "manifest.json"]

    stage("synth", synth_key, do_synth)
    manifest_digest = _digest_files([data_dir / "manifest.json"])

    # train -----------------------------------------------------------------
    ckpt_root = out / "checkpoints"
    trials_path = out / "trials.json"
    train_key = _key("train", manifest_digest, d["ensemble"], d["train"],
                     {k: v for k, v in d["montecarlo"].items() if k != "workers"})

    def do_train():
        dataset = load_dataset(data_dir)
        mc = d["montecarlo"]
        res = monte_carlo(cfg.train_config(), cfg.ensemble_spec(), dataset, n_trials=mc["trials"],
                          lrs=mc["lrs"], workers=workers or mc["workers"] or default_workers(),
                          checkpoint_root=ckpt_root, head=mc["head"])
        trials_path.write_text(json.dumps([t.to_dict() for t in res.trials], indent=2))
        ckpts = [Path(t.checkpoint) / "index.json" for t in res.trials if t.checkpoint]
        return [trials_path] + ckpts

    stage("train", train_key, do_train)
    trials = [_trial_from_dict(t) for t in json.loads(trials_path.read_text())]
    ckpt_files = sorted(p for p in ckpt_root.rglob("*") if p.is_file()) if ckpt_root.exists() else []

    # evaluate --------------------------------------------------------------
    eval_path = out / "evaluation.json"
    eval_key = _key("evaluate", manifest_digest, _digest_files([trials_path] + ckpt_files),
                    d["analysis"]["split"])

    def do_evaluate():
        dataset = load_dataset(data_dir)
        split = d["analysis"]["split"]
        x, y = dataset.split(split)
        rows = []
        for t in trials:
            if not t.checkpoint:
                rows.append({"seed": t.seed, "lr": t.lr, "error": t.error or "no checkpoint"})
                continue
            ckpt = ckpt_root / Path(t.checkpoint).name
            graph, _ = load_checkpoint(ckpt)
            ev = evaluate(graph, x, y)
            rows.append({"seed": t.seed, "lr": t.lr, "checkpoint": str(ckpt.relative_to(out)),
                         "accuracy": ev.accuracy,
                         "confusion": {h: cm.tolist() for h, cm in ev.confusion.items()}})
        eval_path.write_text(json.dumps({"split": split, "trials": rows}, indent=2))
        return [eval_path]

    stage("evaluate", eval_key, do_evaluate)
    evaluation = json.loads(eval_path.read_text())

    # perf ------------------------------------------------------------------
    perf_path, perf_lr_path = out / "perf.csv", out / "perf_by_lr.csv"
    perf_key = _key("perf", _digest_files([eval_path]))

    def do_perf():
        split = evaluation["split"]
        done = [TrialResult(seed=r["seed"], lr=r["lr"], accuracy={split: r["accuracy"]})
                for r in evaluation["trials"] if "accuracy" in r]
        if not done:
            raise RuntimeError("no completed trials to summarize")
        pooled, by_lr = metrics.monte_carlo_rows(MonteCarloResult(done, split=split), d["experiment"], split=split)
        metrics.write_csv(perf_path, pooled)
        metrics.write_csv(perf_lr_path, by_lr, ("lr",) + metrics.CSV_COLUMNS)
        return [perf_path, perf_lr_path]

    stage("perf", perf_key, do_perf)

    # sld -------------------------------------------------------------------
    sld_dir = out / "sld"
    sld_key = _key("sld", _digest_files([eval_path]), d["analysis"])

    def do_sld():
        ref = _reference_trial(evaluation, d["montecarlo"]["head"])
        graph, _ = load_checkpoint(out / ref["checkpoint"])
        dataset = load_dataset(data_dir)
        x, y = dataset.split(d["analysis"]["split"])
        probs = forward_all(graph, x)
        report = analysis.sld_report_from_probs(probs, y, split=d["analysis"]["split"])
        fails = analysis.failures_from_probs(probs, y)
        files = analysis.write_sld_outputs(report, fails, sld_dir, list(dataset.classes), d["analysis"]["bins"])
        (sld_dir / "reference.json").write_text(json.dumps(ref | {"confusion": None}, indent=2))
        return ([files["report"], files["failures"], sld_dir / "reference.json"]
                + files["histograms"] + files["failure_plots"])

    stage("sld", sld_key, do_sld)

    index = _write_index(out, cfg, ledger, result)
    result.index = index
    return result


def _reference_trial(evaluation: dict, head: int) -> dict:
    """Median-performing trial on the chosen head (lower median, first in (lr, seed) order)."""
    rows = [r for r in evaluation["trials"] if "accuracy" in r]
    if not rows:
        raise RuntimeError("no evaluated checkpoint available")
    accs = np.array([r["accuracy"][f"N{head}"] for r in rows])
    order = np.argsort(accs, kind="stable")
    return rows[int(order[(len(rows) - 1) // 2])]


def _write_index(out: Path, cfg: ExperimentConfig, ledger: _Ledger, result: PipelineResult) -> dict:
    stages = ledger.data
    sld_outputs = stages.get("sld", {}).get("outputs", [])
    index = {
        "format": "dragonfly-run/1",
        "experiment": cfg.experiment,
        "config": "config.json",
        "artifacts": {
            "manifest": ["dataset/manifest.json"],
            "checkpoints": [f for f in stages.get("train", {}).get("outputs", []) if f.startswith("checkpoints")],
            "perf": stages.get("perf", {}).get("outputs", []) + ["evaluation.json", "trials.json"],
            "sld": [f for f in sld_outputs if not f.endswith(".svg")],
            "figures": [f for f in sld_outputs if f.endswith(".svg")],
        },
        "stages": {s: {"key": stages[s]["key"], "status": "ran" if s in result.ran else "skipped"}
                   for s in STAGES if s in stages},
    }
    (out / "index.json").write_text(json.dumps(index, indent=2))
    return index
