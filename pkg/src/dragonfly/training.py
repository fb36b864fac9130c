"""Ensemble training under the global-head softlog cross-entropy, and Monte-Carlo trials."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops, tensorio
from .frustum import Dragonfly, EnsembleSpec, forward_all, to_nchw
from .layers import (
    DENSE,
    BatchNorm,
    Conv2D,
    DenseClassifier,
    DepthwiseSeparable,
    SoftlogIntegrator,
)
from .tensor import NonFiniteError, Tape, Tensor, backward

log = logging.getLogger(__name__)

LOSS_MODES = ("softlog", "plain-log")
SPLITS = ("train", "val", "test")
GLOBAL_HEAD = 17


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, op: str):
        self.step = step
        self.op = op
        super().__init__(f"loss became non-finite at step {step} (first non-finite op: {op})")


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    width_scale: float = 0.125
    loss: str = "softlog"
    auxiliary_loss: bool = False

    def __post_init__(self):
        errors = self.errors()
        if errors:
            raise ValueError("; ".join(errors))

    def errors(self) -> list[str]:
        out = []
        if not self.lr >= 0:
            out.append(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            out.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.width_scale > 0:
            out.append(f"width_scale must be positive, got {self.width_scale}")
        if self.loss not in LOSS_MODES:
            out.append(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        return out


@dataclass
class TrialResult:
    seed: int
    lr: float
    accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    diverged: bool = False
    diverged_step: int | None = None
    error: str | None = None
    checkpoint: str | None = None

    def head_accuracy(self, head: int = GLOBAL_HEAD, split: str = "test") -> float:
        return self.accuracy[split][f"N{head}"]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# initialization


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(graph, seed: int) -> None:
    """Deterministic re-initialization of every parameter and batch-norm buffer.

    Convolution and DCN weights draw He-style fan-in uniform values;
    integrator weights draw from U[0.5, 1.5] / B, placed on the per-class
    diagonal blocks in dense mode.
    """
    rng = np.random.default_rng(seed)
    for m in graph.modules():
        if isinstance(m, Conv2D):
            m.weight.data[...] = _he_uniform(rng, m.weight.shape, m.fan_in)
        elif isinstance(m, DepthwiseSeparable):
            _, k, _ = m.depthwise.shape
            m.depthwise.data[...] = _he_uniform(rng, m.depthwise.shape, k * k)
            m.pointwise.data[...] = _he_uniform(rng, m.pointwise.shape, m.pointwise.shape[1])
        elif isinstance(m, DenseClassifier):
            m.weight.data[...] = _he_uniform(rng, m.weight.shape, m.weight.shape[1])
        elif isinstance(m, BatchNorm):
            m.gamma.data[...] = 1.0
            m.beta.data[...] = 0.0
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0
        elif isinstance(m, SoftlogIntegrator):
            b = len(m.branches)
            if m.mode == DENSE:
                k = m.weight.shape[0]
                diag = rng.uniform(0.5, 1.5, size=(b, k)) / b
                w = np.zeros(m.weight.shape)
                for j in range(b):
                    w[np.arange(k), j * k + np.arange(k)] = diag[j]
                m.weight.data[...] = w
            else:
                m.weight.data[...] = rng.uniform(0.5, 1.5, size=b) / b


# ---------------------------------------------------------------------------
# objective


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    q = np.zeros((labels.size, classes))
    q[np.arange(labels.size), labels] = 1.0
    return q


def cross_entropy_loss(p: Tensor, q: np.ndarray, mode: str = "softlog") -> Tensor:
    """``-(1/S) sum_s sum_k q log(p)`` with log replaced by softlog unless ``mode='plain-log'``."""
    logp = ops.softlog(p) if mode == "softlog" else ops.log(p)
    return ops.mul(ops.sum(ops.mul(logp, Tensor(q))), -1.0 / q.shape[0])


def ensemble_objective(heads: list[Tensor], q: np.ndarray, config: TrainConfig) -> Tensor:
    loss = cross_entropy_loss(heads[GLOBAL_HEAD - 1], q, config.loss)
    if config.auxiliary_loss:
        for h in (13, 14, 15, 16):
            loss = ops.add(loss, cross_entropy_loss(heads[h - 1], q, config.loss))
    return loss


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    accuracy: dict[str, float]
    confusion: dict[str, np.ndarray]
    probs: np.ndarray  # (17, N, K)


def decide(probs: np.ndarray) -> np.ndarray:
    """Argmax decision; ties go to the lowest class index."""
    return np.argmax(probs, axis=-1)


def confusion_matrix(labels, predictions, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def evaluate_probs(probs: np.ndarray, labels, head_ids=None) -> Evaluation:
    probs = np.asarray(probs)
    if probs.ndim == 2:
        probs = probs[None]
    classes = probs.shape[-1]
    head_ids = head_ids or list(range(1, probs.shape[0] + 1))
    acc, conf = {}, {}
    for h, p in zip(head_ids, probs):
        cm = confusion_matrix(labels, decide(p), classes)
        conf[f"N{h}"] = cm
        acc[f"N{h}"] = float(100.0 * np.trace(cm) / max(cm.sum(), 1))
    return Evaluation(acc, conf, probs)


def evaluate(graph: Dragonfly, images, labels) -> Evaluation:
    return evaluate_probs(forward_all(graph, images), labels, graph.head_ids())


# ---------------------------------------------------------------------------
# training


def train(graph: Dragonfly, dataset, config: TrainConfig, checkpoint_dir=None,
          init: bool = True) -> TrialResult:
    """Minibatch SGD with momentum on the ensemble objective.

    ``dataset`` provides ``split(name) -> (images NHWC, labels)``.  Raises
    :class:`TrainingDiverged` if the loss turns non-finite.
    """
    t0 = time.perf_counter()
    if init:
        init_params(graph, config.seed)
    x, y = dataset.split("train")
    classes = graph.spec.classes
    params = graph.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    order_rng = np.random.default_rng([config.seed, 0x5EED])
    result = TrialResult(seed=config.seed, lr=config.lr)
    graph.train()
    step = 0
    for _epoch in range(config.epochs):
        order = order_rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            q = one_hot(y[idx], classes)
            with Tape(params) as tape:
                heads = graph(to_nchw(x[idx]))
                loss = ensemble_objective(heads, q, config)
            try:
                grads = backward(tape, loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, exc.op) from exc
            for p, v in zip(params, velocity):
                v *= config.momentum
                v += grads[p]
                p.data -= config.lr * v
            losses.append(loss.item())
            step += 1
        result.step_loss.extend(losses)
        result.epoch_loss.append(float(np.mean(losses)))
    graph.eval()
    for split in SPLITS:
        xs, ys = dataset.split(split)
        if len(ys):
            result.accuracy[split] = evaluate(graph, xs, ys).accuracy
    result.wall_time = time.perf_counter() - t0
    if checkpoint_dir is not None:
        meta = {"trial": result.to_dict(), "config": asdict(config),
                "dataset": getattr(dataset, "manifest_path", None)}
        save_checkpoint(graph, checkpoint_dir, meta)
        result.checkpoint = str(checkpoint_dir)
    return result


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloResult:
    trials: list[TrialResult]
    head: int = GLOBAL_HEAD
    split: str = "test"

    def z(self, lr: float | None = None) -> list[float]:
        """Accuracy set of completed trials, optionally restricted to one learning rate."""
        return [t.head_accuracy(self.head, self.split) for t in self.trials
                if not t.diverged and t.error is None and (lr is None or t.lr == lr)]

    def z_by_lr(self) -> dict[float, list[float]]:
        lrs = sorted({t.lr for t in self.trials})
        return {lr: self.z(lr) for lr in lrs}

    @property
    def failures(self) -> list[TrialResult]:
        return [t for t in self.trials if t.diverged or t.error is not None]


def _run_trial(args) -> TrialResult:
    spec_dict, dataset, config, ckpt = args
    graph = Dragonfly(EnsembleSpec.from_dict(spec_dict))
    try:
        return train(graph, dataset, config, checkpoint_dir=ckpt)
    except TrainingDiverged as exc:
        return TrialResult(seed=config.seed, lr=config.lr, diverged=True,
                           diverged_step=exc.step, error=str(exc))
    except Exception as exc:  # recorded, never fatal for the batch
        log.exception("trial seed=%s lr=%s failed", config.seed, config.lr)
        return TrialResult(seed=config.seed, lr=config.lr, error=f"{type(exc).__name__}: {exc}")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("DRAGONFLY_WORKERS", "1")))
    except ValueError:
        return 1


def monte_carlo(template: TrainConfig, spec: EnsembleSpec, dataset, n_trials: int = 5,
                lrs=(0.001, 0.005, 0.01), seeds=None, workers: int | None = None,
                checkpoint_root=None, head: int = GLOBAL_HEAD) -> MonteCarloResult:
    """Independent trials over initialization seeds (x learning rates).

    Every learning rate reuses the same seed list, so each initialization is
    trained once per rate.  Results are ordered by (lr, seed) regardless of
    completion order.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = list(seeds) if seeds is not None else [template.seed + i for i in range(n_trials)]
    jobs = []
    for lr in lrs:
        for seed in seeds:
            cfg = replace(template, lr=float(lr), seed=int(seed))
            ckpt = None
            if checkpoint_root is not None:
                ckpt = Path(checkpoint_root) / f"lr{lr:g}_seed{seed}"
            jobs.append((spec.to_dict(), dataset, cfg, ckpt))
    workers = min(workers or default_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_run_trial, jobs))
    else:
        trials = [_run_trial(j) for j in jobs]
    trials.sort(key=lambda t: (t.lr, t.seed))
    return MonteCarloResult(trials, head=head)


# ---------------------------------------------------------------------------
# checkpoints


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_checkpoint(graph: Dragonfly, directory, meta: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    items = [("param", n, p.data) for n, p in graph.named_parameters()]
    items += [("buffer", n, b) for n, b in graph.named_buffers()]
    for i, (kind, name, arr) in enumerate(items):
        blob = tensorio.encode(np.asarray(arr, dtype=np.float64))
        fname = f"tensors/{i:04d}.dft1"
        (directory / fname).write_bytes(blob)
        entries.append({"name": name, "kind": kind, "file": fname,
                        "shape": list(np.shape(arr)), "sha256": _sha256(blob)})
    index = {"format": "dragonfly-checkpoint/1", "ensemble": graph.spec.to_dict(),
             "tensors": entries, "meta": meta or {}}
    (directory / "index.json").write_text(json.dumps(index, indent=2, default=_json_default))
    return directory


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_checkpoint(directory) -> tuple[Dragonfly, dict]:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
        graph = Dragonfly(EnsembleSpec.from_dict(index["ensemble"]))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{directory}: unreadable checkpoint index ({exc})") from exc
    params = dict(graph.named_parameters())
    buffers = dict(graph.named_buffers())
    seen = set()
    for e in index["tensors"]:
        path = directory / e["file"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        if _sha256(blob) != e["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['name']}")
        try:
            arr = tensorio.decode(blob, str(path))
        except tensorio.TensorFileError as exc:
            raise CheckpointError(str(exc)) from exc
        target = params.get(e["name"]) if e["kind"] == "param" else buffers.get(e["name"])
        if target is None:
            raise CheckpointError(f"{path}: unknown tensor {e['name']}")
        dest = target.data if isinstance(target, Tensor) else target
        if dest.shape != arr.shape:
            raise CheckpointError(f"{path}: shape {arr.shape} != expected {dest.shape}")
        dest[...] = arr
        seen.add(e["name"])
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"{directory}: missing tensors {sorted(missing)[:3]}")
    graph.eval()
    return graph, index.get("meta", {})
