"""Softlog operator and the bounded information measures built on it.

All measures accept probability vectors along the last axis and broadcast
over leading axes, so ``sld(P, Q)`` with ``P, Q`` of shape (N, K) returns N
divergences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import SOFTLOG_SCALE, SOFTLOG_SHIFT, check_unit_interval
from .tensor import DomainError

E = math.exp(1.0)
E2M1 = math.expm1(2.0)  # e^2 - 1
PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SoftlogParams:
    alpha: float = SOFTLOG_SCALE
    beta: float = SOFTLOG_SHIFT

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError(f"softlog parameters must be positive, got {self}")


def softlog_general(x, params: SoftlogParams | None = None, *, alpha=None, beta=None):
    """``log(alpha * x + beta)``; raises DomainError on a nonpositive argument."""
    if params is not None:
        alpha, beta = params.alpha, params.beta
    arg = alpha * np.asarray(x, dtype=np.float64) + beta
    if np.any(arg <= 0) or np.isnan(arg).any():
        raise DomainError(f"log argument must be positive, got alpha*x+beta={arg!r}")
    out = np.log(arg)
    return float(out) if out.ndim == 0 else out


def softlog(x):
    """The bounded logarithm ``log((e - 1/e) x + 1/e)`` on [0, 1] -> [-1, 1]."""
    x = check_unit_interval(np.asarray(x, dtype=np.float64))
    out = np.log(SOFTLOG_SCALE * x + SOFTLOG_SHIFT)
    return float(out) if out.ndim == 0 else out


def softlog_derivative(x):
    x = check_unit_interval(np.asarray(x, dtype=np.float64))
    return SOFTLOG_SCALE / (SOFTLOG_SCALE * x + SOFTLOG_SHIFT)


def as_probvec(p, name: str = "p") -> np.ndarray:
    """Validate a (batch of) probability vector(s) along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 1:
        raise ValueError(f"{name}: expected a probability vector, got shape {p.shape}")
    if p.size and (p.min() < -PROB_SUM_TOL or p.max() > 1 + PROB_SUM_TOL):
        raise DomainError(f"{name}: entries must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_SUM_TOL):
        raise DomainError(f"{name}: entries must sum to 1")
    return np.clip(p, 0.0, 1.0)


def _pair(p, q):
    p, q = as_probvec(p, "p_i"), as_probvec(q, "p_j")
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"class-count mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return p, q


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def safe_cross_entropy(p_batch, q_batch) -> float:
    """Batch cross-entropy with softlog in place of log: ``-(1/S) sum_s sum_k q log_soft(p)``."""
    p, q = _pair(p_batch, q_batch)
    if p.ndim == 1:
        p, q = p[None], q[None]
    if p.shape != q.shape:
        raise ValueError(f"batch mismatch: {p.shape} vs {q.shape}")
    return float(-(q * softlog(p)).sum() / p.shape[0])


def softlog_entropy(p):
    p = as_probvec(p)
    return _scalar(-(p * softlog(p)).sum(axis=-1))


def softlog_cross_entropy(p_i, p_j):
    p, q = _pair(p_i, p_j)
    return _scalar(-(p * softlog(q)).sum(axis=-1))


def _log_g(t):
    # log((e^2 - 1) t + 1) = log_soft(t) + 1
    return np.log1p(E2M1 * t)


def softlog_relative_entropy(p_i, p_j):
    """Asymmetric softlog relative entropy (cross-entropy minus entropy)."""
    p, q = _pair(p_i, p_j)
    return _scalar(0.5 * (p * (_log_g(p) - _log_g(q))).sum(axis=-1))


def sld(p_i, p_j):
    """SoftLog-Divergence: symmetrized relative entropy, bounded in [0, 1].

    Written as ``1/4 sum_k (p_k - q_k)(log g(p_k) - log g(q_k))`` which is the
    same quantity with every class term non-negative and exact symmetry.
    """
    p, q = _pair(p_i, p_j)
    return _scalar(0.25 * ((p - q) * (_log_g(p) - _log_g(q))).sum(axis=-1))


def mean_sld(outputs_i, outputs_ref) -> float:
    a, b = np.asarray(outputs_i, dtype=np.float64), np.asarray(outputs_ref, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise ValueError("mean_sld over an empty set")
    return float(np.mean(sld(a, b)))
