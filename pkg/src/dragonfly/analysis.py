"""Community analysis of a trained ensemble: per-head SLD against N17, histograms, failures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svg
from .frustum import forward_all
from .softlog import sld
from .tensor import DomainError

REFERENCE_HEAD = 17
REPORT_HEADS = tuple(range(1, 17))
SLD_TOL = 1e-9
DEFAULT_BINS = 20


@dataclass
class HeadRow:
    head: int
    accuracy: float
    mean_sld: float
    samples: np.ndarray = field(repr=False)


@dataclass
class SLDReport:
    rows: list[HeadRow]
    reference_accuracy: float
    split: str = "test"

    def row(self, head: int) -> HeadRow:
        for r in self.rows:
            if r.head == head:
                return r
        raise KeyError(head)

    def to_csv(self) -> str:
        """Wide table: ``metric,N1..N16`` with an accuracy row and an sld row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric"] + [f"N{r.head}" for r in self.rows])
        w.writerow(["accuracy"] + [f"{r.accuracy:.4f}" for r in self.rows])
        w.writerow(["sld"] + [f"{r.mean_sld:.6f}" for r in self.rows])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"split": self.split, f"N{REFERENCE_HEAD}_accuracy": self.reference_accuracy,
                "heads": {f"N{r.head}": {"accuracy": r.accuracy, "sld": r.mean_sld} for r in self.rows}}


def _check_bounds(values: np.ndarray, what: str) -> np.ndarray:
    if values.size and (values.min() < -SLD_TOL or values.max() > 1 + SLD_TOL or not np.isfinite(values).all()):
        raise DomainError(f"{what}: SLD outside [0, 1] (min {values.min()}, max {values.max()})")
    return values


def sld_report_from_probs(probs, labels, heads=REPORT_HEADS, split: str = "test") -> SLDReport:
    """``probs`` is (17, N, K) in head order N1..N17."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 3 or probs.shape[1] == 0:
        raise ValueError(f"empty or malformed split: probs shape {probs.shape}")
    ref = probs[REFERENCE_HEAD - 1]
    rows = []
    for h in heads:
        p = probs[h - 1]
        samples = _check_bounds(np.asarray(sld(p, ref), dtype=np.float64).reshape(-1), f"N{h}")
        acc = 100.0 * float(np.mean(p.argmax(-1) == labels))
        rows.append(HeadRow(h, acc, float(np.mean(samples)), samples))
    ref_acc = 100.0 * float(np.mean(ref.argmax(-1) == labels))
    return SLDReport(rows, ref_acc, split)


def branch_sld_report(graph, images, labels, split: str = "test") -> SLDReport:
    if len(labels) == 0:
        raise ValueError(f"split {split!r} is empty")
    return sld_report_from_probs(forward_all(graph, images), labels, split=split)


# ---------------------------------------------------------------------------
# histograms


def sld_histogram(samples, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Counts over uniform bins on [0, 1]; bins are [a, b) except the last, which is closed."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    if s.size and (s.min() < -SLD_TOL or s.max() > 1 + SLD_TOL or not np.isfinite(s).all()):
        raise DomainError("histogram samples must lie in [0, 1]")
    s = np.clip(s, 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((s * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins), edges


def histogram_svg(samples, bins: int = DEFAULT_BINS, title: str = "") -> str:
    counts, edges = sld_histogram(samples, bins)
    return svg.bar_chart(counts.tolist(), title=title, xlabel="SLD", ylabel="examples", edges=edges)


# ---------------------------------------------------------------------------
# failures


@dataclass
class FailureCase:
    example: int
    label: int
    prediction: int
    probs: np.ndarray  # (17, K)
    flagged: list[int]  # heads whose decision differs from N17's

    def to_dict(self, classes=None) -> dict:
        name = (lambda k: classes[k]) if classes else (lambda k: k)
        return {
            "example": self.example,
            "label": name(self.label),
            "prediction": name(self.prediction),
            "heads": {f"N{h + 1}": [float(v) for v in self.probs[h]] for h in range(self.probs.shape[0])},
            "discordant_heads": [f"N{h}" for h in self.flagged],
        }


def failures_from_probs(probs, labels) -> list[FailureCase]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    decisions = probs.argmax(-1)  # (17, N)
    ref = decisions[REFERENCE_HEAD - 1]
    out = []
    for i in np.flatnonzero(ref != labels):
        flagged = [h + 1 for h in range(probs.shape[0]) if decisions[h, i] != ref[i]]
        out.append(FailureCase(int(i), int(labels[i]), int(ref[i]), probs[:, i, :].copy(), flagged))
    return out


def failure_report(graph, images, labels) -> list[FailureCase]:
    return failures_from_probs(forward_all(graph, images), labels)


def failures_svg(case: FailureCase, classes=None) -> str:
    """Per-head probability assigned to the true class; discordant heads are marked with '*'."""
    heights = case.probs[:, case.label].tolist()
    labels = [f"{h + 1}{'*' if h + 1 in case.flagged else ''}" for h in range(len(heights))]
    true = classes[case.label] if classes else case.label
    pred = classes[case.prediction] if classes else case.prediction
    return svg.bar_chart(heights, labels=labels, ylabel="p(true class)",
                         title=f"example {case.example}: true {true}, N17 says {pred}")


def write_sld_outputs(report: SLDReport, failures: list[FailureCase], out_dir, classes=None,
                      bins: int = DEFAULT_BINS) -> dict:
    out = Path(out_dir)
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    (out / "failures").mkdir(exist_ok=True)
    files = {"report": str(out / "report.csv"), "histograms": [], "failures": str(out / "failures.json"),
             "failure_plots": []}
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2))
    for r in report.rows:
        p = out / "histograms" / f"N{r.head}.svg"
        p.write_text(histogram_svg(r.samples, bins, title=f"SLD(N{r.head}, N17), mean {r.mean_sld:.3f}"))
        files["histograms"].append(str(p))
    (out / "failures.json").write_text(json.dumps([f.to_dict(classes) for f in failures], indent=2))
    for f in failures:
        p = out / "failures" / f"example_{f.example:05d}.svg"
        p.write_text(failures_svg(f, classes))
        files["failure_plots"].append(str(p))
    return files
