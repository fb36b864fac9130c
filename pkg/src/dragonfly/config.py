"""Declarative experiment configuration: JSON with defaults, validation and a commented template.

Keys starting with ``_`` are comments and are ignored everywhere.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .frustum import CANONICAL_BRANCHES, BranchSpec, EnsembleSpec, ExtentError, canonical_frustum, Dragonfly
from .geometron import EXPERIMENTS, SPLITS, Jitter
from .layers import DENSE, SCALAR, NotationError, parse_layer_notation
from .training import LOSS_MODES, TrainConfig

DEFAULTS: dict = {
    "experiment": 1,
    "dataset": {
        "counts": [200, 50, 100],
        "seed": 0,
        "size": 32,
        "jitter": {"rotation": 15.0, "scale": [0.8, 1.1], "translation": 0.1},
        "previews": 4,
    },
    "ensemble": {
        "width_scale": 0.125,
        "padding": "same",
        "integrator_mode": DENSE,
        "block_pool": "G5[v2]",
        "final_pools": {},
    },
    "train": {
        "lr": 0.005,
        "momentum": 0.9,
        "batch_size": 32,
        "epochs": 10,
        "seed": 0,
        "loss": "softlog",
        "auxiliary_loss": False,
    },
    "montecarlo": {"trials": 5, "lrs": [0.001, 0.005, 0.01], "head": 17, "workers": None},
    "analysis": {"split": "test", "bins": 20},
    "out": "runs/experiment",
}

TEMPLATE_COMMENTS = {
    "_about": "DRAGONFLY experiment config. Keys starting with '_' are comments.",
    "_experiment": "1 = binary IO, 2 = binary BDOQ, 3 = IO-SVA (texture encrypted).",
    "dataset": {"_counts": "per-class sample counts for train, val, test"},
    "ensemble": {
        "_final_pools": "optional overrides, e.g. {\"N1\": [\"F7[v3]\", \"G11[v5]\"]}",
        "_padding": "'same' keeps small inputs alive through every pool; 'valid' needs large inputs",
    },
    "train": {"_loss": "'softlog' (default) or 'plain-log' (stress runs only)"},
    "montecarlo": {"_workers": "null = DRAGONFLY_WORKERS env var or 1"},
}


@dataclass
class ConfigIssue:
    key: str
    message: str
    line: int | None = None

    def format(self, source: str = "<config>") -> str:
        where = f"{source}:{self.line}" if self.line else source
        return f"{where}: {self.key or '<root>'}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, issues: list[ConfigIssue], source: str = "<config>"):
        self.issues = issues
        self.source = source
        super().__init__("\n".join(i.format(source) for i in issues))


def strip_comments(obj):
    if isinstance(obj, dict):
        return {k: strip_comments(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, list):
        return [strip_comments(v) for v in obj]
    return obj


def _locate(text: str | None, path: list[str]) -> int | None:
    """Line of the innermost key of ``path`` in the raw JSON text (best effort)."""
    if not text:
        return None
    pos, found = 0, None
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = found = m.start()
    return None if found is None else text.count("\n", 0, found) + 1


def _merge(defaults: dict, user: dict, prefix: list[str], issues: list[ConfigIssue]) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in user.items():
        path = prefix + [k]
        if k not in defaults:
            issues.append(ConfigIssue(".".join(path), "unknown key"))
            continue
        d = defaults[k]
        if isinstance(d, dict) and d and not isinstance(v, dict):
            issues.append(ConfigIssue(".".join(path), f"expected an object, got {type(v).__name__}"))
        elif isinstance(d, dict) and d:
            out[k] = _merge(d, v, path, issues)
        else:
            out[k] = v
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(cfg: dict, issues: list[ConfigIssue]) -> None:
    def err(key, msg):
        issues.append(ConfigIssue(key, msg))

    exp = cfg["experiment"]
    if exp not in EXPERIMENTS or not _is_int(exp):
        err("experiment", f"must be one of {sorted(EXPERIMENTS)}, got {exp!r}")

    ds = cfg["dataset"]
    c = ds["counts"]
    if not (isinstance(c, list) and len(c) == 3 and all(_is_int(v) and v >= 1 for v in c)):
        err("dataset.counts", f"must be three positive integers, got {c!r}")
    if not _is_int(ds["seed"]):
        err("dataset.seed", "must be an integer")
    if not (_is_int(ds["size"]) and ds["size"] >= 16):
        err("dataset.size", f"must be an integer >= 16, got {ds['size']!r}")
    if not (_is_int(ds["previews"]) and ds["previews"] >= 0):
        err("dataset.previews", "must be a non-negative integer")
    j = ds["jitter"]
    if j is not None:
        try:
            Jitter(float(j["rotation"]), tuple(float(s) for s in j["scale"]), float(j["translation"]))
        except (TypeError, ValueError, KeyError) as exc:
            err("dataset.jitter", str(exc))

    en = cfg["ensemble"]
    ws = en["width_scale"]
    if not (_is_num(ws) and ws > 0):
        err("ensemble.width_scale", f"must be a positive number, got {ws!r}")
    else:
        for b, (_, shape, _, _) in CANONICAL_BRANCHES.items():
            try:
                canonical_frustum(shape, ws)
            except ValueError as exc:
                err("ensemble.width_scale", f"N{b}: {exc}")
                break
    if en["padding"] not in ("same", "valid"):
        err("ensemble.padding", f"must be 'same' or 'valid', got {en['padding']!r}")
    if en["integrator_mode"] not in (DENSE, SCALAR):
        err("ensemble.integrator_mode", f"must be '{DENSE}' or '{SCALAR}', got {en['integrator_mode']!r}")
    _check_pool(en["block_pool"], "ensemble.block_pool", err)
    fp = en["final_pools"]
    if not isinstance(fp, dict):
        err("ensemble.final_pools", "must be an object mapping N1..N12 to two pool tokens")
    else:
        for name, tokens in fp.items():
            key = f"ensemble.final_pools.{name}"
            if not (isinstance(name, str) and name.startswith("N") and name[1:].isdigit()
                    and int(name[1:]) in CANONICAL_BRANCHES):
                err(key, "branch must be one of N1..N12")
                continue
            if not (isinstance(tokens, list) and len(tokens) == 2):
                err(key, "must list exactly two pool tokens")
                continue
            for t in tokens:
                _check_pool(t, key, err)

    tr = cfg["train"]
    for k in ("lr", "momentum"):
        if not _is_num(tr[k]):
            err(f"train.{k}", "must be a number")
    for k in ("batch_size", "epochs", "seed"):
        if not _is_int(tr[k]):
            err(f"train.{k}", "must be an integer")
    if not isinstance(tr["auxiliary_loss"], bool):
        err("train.auxiliary_loss", "must be true or false")
    if tr["loss"] not in LOSS_MODES:
        err("train.loss", f"must be one of {LOSS_MODES}, got {tr['loss']!r}")
    elif all(_is_num(tr[k]) for k in ("lr", "momentum")) and all(_is_int(tr[k]) for k in ("batch_size", "epochs")):
        probe = TrainConfig.__new__(TrainConfig)
        probe.__dict__.update(tr, width_scale=1.0)
        for msg in probe.errors():
            err("train." + msg.split()[0], msg)

    mc = cfg["montecarlo"]
    if not (_is_int(mc["trials"]) and mc["trials"] >= 1):
        err("montecarlo.trials", f"must be an integer >= 1, got {mc['trials']!r}")
    lrs = mc["lrs"]
    if not (isinstance(lrs, list) and lrs and all(_is_num(v) and v > 0 for v in lrs)):
        err("montecarlo.lrs", f"must be a non-empty list of positive numbers, got {lrs!r}")
    if not (_is_int(mc["head"]) and 1 <= mc["head"] <= 17):
        err("montecarlo.head", "must be an integer in 1..17")
    if mc["workers"] is not None and not (_is_int(mc["workers"]) and mc["workers"] >= 1):
        err("montecarlo.workers", "must be null or an integer >= 1")

    an = cfg["analysis"]
    if an["split"] not in SPLITS:
        err("analysis.split", f"must be one of {SPLITS}")
    if not (_is_int(an["bins"]) and an["bins"] >= 2):
        err("analysis.bins", "must be an integer >= 2")
    if not isinstance(cfg["out"], str) or not cfg["out"]:
        err("out", "must be a non-empty path string")


def _check_pool(token, key, err) -> None:
    if not isinstance(token, str):
        err(key, f"expected a pool token string, got {token!r}")
        return
    try:
        spec = parse_layer_notation(token)
    except NotationError as exc:
        err(key, str(exc))
        return
    if not spec.is_pool:
        err(key, f"{token!r} is not a pooling layer")


@dataclass
class ExperimentConfig:
    data: dict

    @property
    def experiment(self) -> int:
        return self.data["experiment"]

    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    def classes(self) -> int:
        return len(EXPERIMENTS[self.experiment].classes)

    def jitter(self) -> Jitter | None:
        j = self.data["dataset"]["jitter"]
        return None if j is None else Jitter(float(j["rotation"]), tuple(j["scale"]), float(j["translation"]))

    def ensemble_spec(self) -> EnsembleSpec:
        en = self.data["ensemble"]
        size = self.data["dataset"]["size"]
        block = parse_layer_notation(en["block_pool"])
        branches = []
        for b in sorted(CANONICAL_BRANCHES):
            over = {"block_pool": block}
            if f"N{b}" in en["final_pools"]:
                over["final_pools"] = tuple(parse_layer_notation(t) for t in en["final_pools"][f"N{b}"])
            branches.append(BranchSpec.canonical(b, en["width_scale"], **over))
        return EnsembleSpec(self.classes(), (size, size, 1), en["width_scale"], en["padding"],
                            en["integrator_mode"], branches)

    def train_config(self, **overrides) -> TrainConfig:
        tr = dict(self.data["train"], width_scale=self.data["ensemble"]["width_scale"])
        tr.update(overrides)
        return TrainConfig(**tr)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def section_hash(self, *sections: str) -> str:
        blob = json.dumps({s: self.data[s] for s in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def validate_config(source, text: str | None = None, label: str | None = None) -> ExperimentConfig:
    """Normalize a config given as a path, a JSON string or a dict.

    Raises :class:`ConfigError` listing every problem with its key and, when
    the raw text is available, its line.
    """
    label = label or "<config>"
    if isinstance(source, dict):
        raw = source
    else:
        if text is None:
            path = Path(source)
            label = str(path)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError([ConfigIssue("", f"cannot read config: {exc}")], label) from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([ConfigIssue("", f"invalid JSON: {exc.msg}", exc.lineno)], label) from None
    if not isinstance(raw, dict):
        raise ConfigError([ConfigIssue("", "top level must be a JSON object")], label)
    issues: list[ConfigIssue] = []
    merged = _merge(DEFAULTS, strip_comments(raw), [], issues)
    _check(merged, issues)
    if not issues:
        cfg = ExperimentConfig(merged)
        try:
            Dragonfly(cfg.ensemble_spec())
        except ExtentError as exc:
            issues.append(ConfigIssue("ensemble.padding", f"input of size {merged['dataset']['size']} "
                                      f"is too small for the pooling chain: {exc}"))
        except ValueError as exc:
            issues.append(ConfigIssue("ensemble", str(exc)))
    if issues:
        for i in issues:
            i.line = _locate(text, i.key.split(".")) if i.key else i.line
        raise ConfigError(issues, label)
    return cfg


def template(experiment: int = 1, out: str | None = None) -> dict:
    """A fully defaulted config interleaved with ``_`` comment keys."""
    cfg = copy.deepcopy(DEFAULTS)
    cfg["experiment"] = experiment
    cfg["out"] = out or f"runs/experiment-{experiment}"
    result = {k: v for k, v in TEMPLATE_COMMENTS.items() if not isinstance(v, dict)}
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(TEMPLATE_COMMENTS.get(k), dict):
            v = {**TEMPLATE_COMMENTS[k], **v}
        result[k] = v
    return result
