"""Performance tensor and Ability over Monte-Carlo accuracy sets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

CSV_COLUMNS = ("experiment", "head", "n_trials", "min", "mean", "median", "max", "ability")


@dataclass(frozen=True)
class PerfTensor:
    min: float
    mean: float
    median: float
    max: float

    def __post_init__(self):
        tol = 1e-9
        if not (self.min - tol <= self.median <= self.max + tol and self.min - tol <= self.mean <= self.max + tol):
            raise ValueError(f"inconsistent performance tensor {self}")

    def as_list(self) -> list:
        return [self.min, (self.mean, self.median), self.max]

    def __str__(self):
        return f"[{self.min:.1f},({self.mean:.1f},{self.median:.1f}),{self.max:.1f}]"


@dataclass(frozen=True)
class AbilityWeights:
    alpha: float = 0.5   # Max
    beta: float = 0.25   # (Mean + Median) / 2
    gamma: float = 0.25  # Min

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"ability weights must be non-negative: {self}")
        if not math.isclose(self.alpha + self.beta + self.gamma, 1.0, abs_tol=1e-12):
            raise ValueError(f"ability weights must sum to 1: {self}")


def perf_tensor(z: Iterable[float]) -> PerfTensor:
    z = np.asarray(list(z), dtype=np.float64)
    if z.size == 0:
        raise ValueError("performance tensor of an empty accuracy set")
    if np.any((z < 0) | (z > 100)) or not np.all(np.isfinite(z)):
        raise ValueError("accuracies must lie in [0, 100]")
    s = np.sort(z)
    n = s.size
    med = s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])
    mean = float(math.fsum(s) / n)
    # fsum keeps the mean inside [min, max] even for constant sets
    mean = min(max(mean, s[0]), s[-1])
    return PerfTensor(float(s[0]), mean, float(med), float(s[-1]))


def ability(t: PerfTensor, w: AbilityWeights = AbilityWeights()) -> float:
    return w.alpha * t.max + w.beta * (t.mean + t.median) / 2 + w.gamma * t.min


def perf_row(experiment, head, z, w: AbilityWeights = AbilityWeights()) -> dict:
    z = list(z)
    t = perf_tensor(z)
    return {"experiment": experiment, "head": head, "n_trials": len(z),
            "min": t.min, "mean": t.mean, "median": t.median, "max": t.max,
            "ability": ability(t, w)}


def rows_to_csv(rows, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_csv(path, rows, columns=CSV_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows, columns))
    return path


def monte_carlo_rows(mc, experiment, heads=range(1, 18), split: str = "test",
                     w: AbilityWeights = AbilityWeights()) -> tuple[list[dict], list[dict]]:
    """Per-head rows pooled across learning rates, and per-(lr, head) rows.

    The per-lr table carries an extra ``lr`` column.
    """
    done = [t for t in mc.trials if not t.diverged and t.error is None]
    pooled, by_lr = [], []
    for h in heads:
        z = [t.accuracy[split][f"N{h}"] for t in done]
        if z:
            pooled.append(perf_row(experiment, f"N{h}", z, w))
        for lr in sorted({t.lr for t in done}):
            zl = [t.accuracy[split][f"N{h}"] for t in done if t.lr == lr]
            by_lr.append({"lr": lr, **perf_row(experiment, f"N{h}", zl, w)})
    return pooled, by_lr
