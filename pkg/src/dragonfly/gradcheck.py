"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    eps: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, threshold: float) -> bool:
        return self.max_error < threshold

    def to_dict(self) -> dict:
        return {"eps": self.eps, "max_error": self.max_error,
                "errors": dict(self.errors), "checked": dict(self.checked)}


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on every call.  Per parameter the report holds the largest
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over the
    checked entries; ``max_entries`` samples that many entries per parameter
    (deterministically from ``seed``) instead of checking all of them.
    """
    named = dict(params) if isinstance(params, dict) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)}
    for p in named.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")

    with Tape(list(named.values())) as tape:
        loss = loss_fn()
    grads = backward(tape, loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps)
    for name, p in named.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        analytic = grads[p].reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report.errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if len(idx) else 0.0
        report.checked[name] = int(len(idx))
    return report


# ---------------------------------------------------------------------------
# suites


def _projection_loss(outputs, rng):
    """Scalar loss as fixed random projections of every output, so all paths carry gradient."""
    from . import ops

    weights = [Tensor(rng.standard_normal(o.shape)) for o in outputs()]

    def loss():
        total = None
        outs = outputs()
        for o, w in zip(outs, weights):
            term = ops.sum(ops.mul(o, w))
            total = term if total is None else ops.add(total, term)
        return total

    return loss


def layer_suite(seed: int = 0, eps: float = 1e-5, max_entries: int | None = 40) -> dict[str, GradCheckReport]:
    """Gradient check of every layer kind on small random inputs."""
    from . import layers as L
    from . import ops
    from .training import init_params

    rng = np.random.default_rng(seed)

    def inp(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name="x")

    def probs(n, k):
        return Tensor(rng.dirichlet(np.ones(k), size=n), requires_grad=True, name="p")

    cases = {}
    x = inp(2, 3, 9, 9)
    conv = L.Conv2D(3, 4, 3)
    dsc = L.DepthwiseSeparable(3, 5, 3)
    bn = L.BatchNorm(3)
    for m in (conv, dsc):
        init_params(m, seed)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.standard_normal(3)
    bn_eval = L.BatchNorm(3)
    bn_eval.running_mean[:] = rng.standard_normal(3)
    bn_eval.running_var[:] = rng.uniform(0.5, 2.0, 3)
    bn_eval.eval()
    dcn = L.DenseClassifier(3 * 9 * 9, 4)
    dcn.weight.data[:] = rng.standard_normal(dcn.weight.shape) * 0.1
    cases["Conv2D"] = (lambda: conv(x), [x, conv.weight])
    cases["DSC"] = (lambda: dsc(x), [x, dsc.depthwise, dsc.pointwise])
    cases["BatchNorm"] = (lambda: bn(x), [x, bn.gamma, bn.beta])
    cases["BatchNorm(eval)"] = (lambda: bn_eval(x), [x, bn_eval.gamma, bn_eval.beta])
    cases["ReLU"] = (lambda: L.ReLU()(x), [x])
    cases["MaxPool"] = (lambda: L.Pool(L.parse_layer_notation("G5[v2]"))(x), [x])
    cases["AvgPool"] = (lambda: L.Pool(L.parse_layer_notation("F5[v1]"))(x), [x])
    cases["DCN"] = (lambda: dcn(x), [x, dcn.weight])
    logits = inp(4, 5)
    cases["Softmax"] = (lambda: L.Softmax()(logits), [logits])
    p = probs(4, 5)
    cases["Softlog"] = (lambda: ops.softlog(p), [p])
    branch = [probs(4, 3) for _ in range(3)]
    for mode in (L.DENSE, L.SCALAR):
        integ = L.SoftlogIntegrator((1, 2, 3), 3, mode)
        integ.weight.data[:] = rng.uniform(-1.5, 1.5, integ.weight.shape)
        cases[f"SoftlogIntegrator({mode})"] = (lambda integ=integ: integ(branch), branch + [integ.weight])

    out = {}
    for name, (fwd, params) in cases.items():
        loss = _projection_loss(lambda fwd=fwd: [fwd()], rng)
        named = {f"{name}:{i}:{p.name or 'param'}": p for i, p in enumerate(params)}
        out[name] = grad_check(loss, named, eps=eps, max_entries=max_entries, seed=seed)
    return out


def ensemble_check(size: int = 16, width_scale: float = 0.125, classes: int = 3, batch: int = 3,
                   seed: int = 0, eps: float = 1e-5, max_entries: int | None = 3) -> GradCheckReport:
    """Gradient check of the full 17-head ensemble under a projection of all heads plus the N17 objective."""
    from . import ops
    from .frustum import build_dragonfly, to_nchw
    from .training import cross_entropy_loss, init_params, one_hot

    rng = np.random.default_rng(seed)
    _, graph = build_dragonfly(classes, (size, size, 1), width_scale)
    init_params(graph, seed)
    graph.train()
    x = to_nchw(rng.random((batch, size, size, 1)))
    q = one_hot(rng.integers(0, classes, batch), classes)
    project = _projection_loss(lambda: graph(x), rng)

    def loss():
        heads = graph(x)
        return ops.add(cross_entropy_loss(heads[-1], q), ops.mul(project(), 0.1))

    return grad_check(loss, dict(graph.named_parameters()), eps=eps, max_entries=max_entries, seed=seed)
