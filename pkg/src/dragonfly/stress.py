"""Constructed stress runs contrasting plain log and softlog objectives.

Both harnesses start from adversarial, saturated softmax outputs: the true
class receives probability exactly 0 in float64.  Plain ``log`` turns that
into ``-inf``; softlog maps it to ``-1`` and training continues.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import NonFiniteError, Tape, Tensor, backward
from .training import cross_entropy_loss, one_hot


@dataclass
class StressResult:
    mode: str
    steps_requested: int
    losses: list[float] = field(default_factory=list)
    nonfinite_step: int | None = None
    nonfinite_op: str | None = None

    @property
    def steps_completed(self) -> int:
        return len(self.losses)

    @property
    def finite(self) -> bool:
        return self.nonfinite_step is None and all(np.isfinite(self.losses))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "steps_requested": self.steps_requested,
                "steps_completed": self.steps_completed, "finite": self.finite,
                "nonfinite_step": self.nonfinite_step, "nonfinite_op": self.nonfinite_op,
                "final_loss": self.losses[-1] if self.losses else None}


def _sgd(params, loss_fn, mode, steps, lr) -> StressResult:
    res = StressResult(mode, steps)
    for step in range(steps):
        with Tape(params) as tape:
            loss = loss_fn()
        try:
            grads = backward(tape, loss)
        except NonFiniteError as exc:
            res.nonfinite_step, res.nonfinite_op = step, exc.op
            return res
        for p in params:
            p.data -= lr * grads[p]
        res.losses.append(loss.item())
    return res


def _adversarial_targets(labels, classes, magnitude):
    # every wrong class sits far above the true one
    z = np.full((labels.size, classes), magnitude)
    z[np.arange(labels.size), labels] = -magnitude
    return z


def logit_stress(mode: str = "softlog", steps: int = 100, magnitude: float = 1e4,
                 classes: int = 4, batch: int = 16, lr: float = 1e-3, seed: int = 0) -> StressResult:
    """Linear softmax classifier whose initial logits have magnitude ``magnitude``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, batch))
    y = rng.integers(0, classes, batch)
    w = Tensor(np.linalg.solve(x, _adversarial_targets(y, classes, magnitude)), requires_grad=True)
    xt, q = Tensor(x), one_hot(y, classes)

    def loss_fn():
        return cross_entropy_loss(ops.softmax(ops.matmul(xt, w)), q, mode)

    return _sgd([w], loss_fn, mode, steps, lr)


def cascade_stress(mode: str = "softlog", steps: int = 100, magnitude: float = 1e2,
                   weight: float = 1e3, branches: int = 4, classes: int = 4, batch: int = 16,
                   lr: float = 1e-3, seed: int = 0) -> StressResult:
    """Saturated branch softmaxes fused by a second softmax.

    ``mode='plain-log'`` fuses with softmax(sum_b a_b p_b) (two successive
    softmax) and trains with plain log; ``mode='softlog'`` inserts softlog
    before the fusion and trains with softlog cross-entropy.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, batch)))
    y = rng.integers(0, classes, batch)
    q = one_hot(y, classes)
    ws = [Tensor(np.linalg.solve(x.data, _adversarial_targets(y, classes, magnitude)), requires_grad=True)
          for _ in range(branches)]
    alpha = Tensor(np.full(branches, weight), requires_grad=True)

    def loss_fn():
        probs = [ops.softmax(ops.matmul(x, w)) for w in ws]
        if mode == "softlog":
            probs = [ops.softlog(p) for p in probs]
        fused = ops.softmax(ops.affine_combine(probs, alpha))
        return cross_entropy_loss(fused, q, mode)

    return _sgd(ws + [alpha], loss_fn, mode, steps, lr)
