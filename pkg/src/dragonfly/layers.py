"""Layer vocabulary of the frustum tables and the softlog-softmax integrator.

Layer tokens follow the table notation: ``C3[128]`` (2D convolution, 3x3,
128 filters), ``D3[96]`` (depthwise-separable: 3x3 channelwise then 96
pointwise filters), ``F7[v3]`` (7x7 average pool, stride 3) and ``G5[v2]``
(5x5 max pool, stride 2).  The down-arrow may be written ``v`` or ``↓``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

CONV2D = "Conv2D"
DSC = "DSC"
BATCHNORM = "BatchNorm"
RELU = "ReLU"
MAXPOOL = "MaxPool"
AVGPOOL = "AvgPool"
DCN = "DCN"
SOFTMAX = "Softmax"
INTEGRATOR = "SoftlogIntegrator"

_PREFIX = {CONV2D: "C", DSC: "D", AVGPOOL: "F", MAXPOOL: "G"}
_KIND = {v: k for k, v in _PREFIX.items()}


class NotationError(ValueError):
    def __init__(self, text: str, pos: int, msg: str):
        self.text = text
        self.pos = pos
        super().__init__(f"{msg} at position {pos} in {text!r}")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0      # L (filter side) or M (pool window side)
    count: int = 0     # N: filters for convs, stride for pools
    branches: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind in _PREFIX and (self.size < 1 or self.count < 1):
            raise ValueError(f"{self.kind} needs positive size and count, got {self.size}, {self.count}")

    @property
    def is_pool(self) -> bool:
        return self.kind in (MAXPOOL, AVGPOOL)

    def format(self) -> str:
        if self.kind in (CONV2D, DSC):
            return f"{_PREFIX[self.kind]}{self.size}[{self.count}]"
        if self.is_pool:
            return f"{_PREFIX[self.kind]}{self.size}[v{self.count}]"
        if self.kind == INTEGRATOR:
            return f"{INTEGRATOR}({','.join(str(b) for b in self.branches)})"
        return self.kind

    __str__ = format


_TOKEN = re.compile(r"([CDFG])(\d+)\[(v|↓)?(\d+)\]")


def parse_layer_notation(text: str) -> LayerSpec:
    """Parse one table token such as ``"G5[v2]"`` into a :class:`LayerSpec`."""
    s = text.strip()
    offset = len(text) - len(text.lstrip())
    if not s:
        raise NotationError(text, 0, "empty layer token")
    if s[0] not in "CDFG":
        raise NotationError(text, offset, f"unknown layer prefix {s[0]!r}, expected one of C, D, F, G")
    m = _TOKEN.fullmatch(s)
    if m is None:
        pos = _first_bad_position(s)
        raise NotationError(text, offset + pos, "malformed layer token")
    prefix, size, arrow, count = m.groups()
    kind = _KIND[prefix]
    is_pool = kind in (MAXPOOL, AVGPOOL)
    if is_pool and arrow is None:
        raise NotationError(text, offset + s.index("[") + 1, "pool stride must be written as [vN]")
    if not is_pool and arrow is not None:
        raise NotationError(text, offset + s.index("[") + 1, "convolution filter count takes no arrow")
    try:
        return LayerSpec(kind, int(size), int(count))
    except ValueError as exc:
        raise NotationError(text, offset, str(exc)) from None


def _first_bad_position(s: str) -> int:
    i = 1
    while i < len(s) and s[i].isdigit():
        i += 1
    if i == 1:
        return 1
    if i >= len(s) or s[i] != "[":
        return i
    i += 1
    if i < len(s) and s[i] in "v↓":
        i += 1
    j = i
    while i < len(s) and s[i].isdigit():
        i += 1
    if i == j:
        return i
    if i >= len(s) or s[i] != "]":
        return i
    return i + 1


# ---------------------------------------------------------------------------
# modules


class Module:
    """Minimal container: parameters, buffers, children and a train/eval flag."""

    training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, p) for n, p in self._own_params()]
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, getattr(self, n)) for n in getattr(self, "_buffers", ())]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            getattr(self, head)[...] = value
            return
        child = getattr(self, head)
        if isinstance(child, (list, tuple)):
            idx, _, rest = rest.partition(".")
            child = child[int(idx)]
        child.set_buffer(rest, value)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(shape, name: str, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


class Conv2D(Module):
    """``C_L[N]``: N filters of size (L, L) over all input channels, stride 1, no bias."""

    def __init__(self, in_channels: int, filters: int, size: int = 3, padding: str = "same"):
        self.spec = LayerSpec(CONV2D, size, filters)
        self.padding = padding
        self.weight = _param((filters, in_channels, size, size), "weight")

    @property
    def fan_in(self) -> int:
        _, c, k, _ = self.weight.shape
        return c * k * k

    def forward(self, x):
        return ops.conv2d(x, self.weight, stride=1, padding=self.padding)


class DepthwiseSeparable(Module):
    """``D_L[N]``: channelwise (L, L) convolution followed by N pointwise filters."""

    def __init__(self, in_channels: int, filters: int, size: int = 3, padding: str = "same"):
        self.spec = LayerSpec(DSC, size, filters)
        self.padding = padding
        self.depthwise = _param((in_channels, size, size), "depthwise")
        self.pointwise = _param((filters, in_channels), "pointwise")

    def forward(self, x):
        return ops.pointwise_conv(ops.depthwise_conv2d(x, self.depthwise, padding=self.padding),
                                  self.pointwise)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.spec = LayerSpec(BATCHNORM)
        self.eps = eps
        self.momentum = momentum
        self.gamma = _param((channels,), "gamma")
        self.gamma.data[:] = 1.0
        self.beta = _param((channels,), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x):
        if not self.training:
            return ops.batchnorm(x, self.gamma, self.beta, self.eps,
                                 running=(self.running_mean, self.running_var))
        y, mu, var = ops.batchnorm(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean[...] = m * self.running_mean + (1 - m) * mu
        self.running_var[...] = m * self.running_var + (1 - m) * var
        return y


class ReLU(Module):
    spec = LayerSpec(RELU)

    def forward(self, x):
        return ops.relu(x)


class Pool(Module):
    def __init__(self, spec: LayerSpec, padding: str = "same"):
        if not spec.is_pool:
            raise ValueError(f"not a pooling spec: {spec}")
        self.spec = spec
        self.padding = padding

    def forward(self, x):
        fn = ops.maxpool if self.spec.kind == MAXPOOL else ops.avgpool
        return fn(x, self.spec.size, self.spec.count, padding=self.padding)


class DenseClassifier(Module):
    """DCN matrix of shape (K, N) applied to the vectorized input, no bias."""

    def __init__(self, features: int, classes: int):
        self.spec = LayerSpec(DCN)
        self.weight = _param((classes, features), "weight")

    def forward(self, x):
        v = ops.flatten(x) if x.ndim > 2 else x
        if v.shape[1] != self.weight.shape[1]:
            raise ShapeError("dcn", v.shape, self.weight.shape,
                             detail="vectorized feature length must equal DCN width")
        return ops.matmul(v, ops.transpose(self.weight))


def dcn_apply(features, dcn) -> np.ndarray:
    """Plain-array DCN product: ``dcn @ vec(features)`` for one example."""
    v = np.asarray(features, dtype=np.float64).reshape(-1)
    d = np.asarray(dcn, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != v.size:
        raise ShapeError("dcn", v.shape, d.shape)
    return d @ v


class Softmax(Module):
    spec = LayerSpec(SOFTMAX)

    def forward(self, x):
        return ops.softmax(x, axis=-1)


SCALAR = "scalar"
DENSE = "dense"


@dataclass
class IntegratorWeights:
    mode: str
    weights: Tensor

    def check(self, branches: int, classes: int) -> None:
        want = (branches,) if self.mode == SCALAR else (classes, branches * classes)
        if self.mode not in (SCALAR, DENSE):
            raise ValueError(f"unknown integrator mode {self.mode!r}")
        if self.weights.shape != want:
            raise ShapeError("integrator", self.weights.shape, want,
                             detail=f"{self.mode} mode over {branches} branches")


def softlog_softmax_integrator(branch_probs, weights: IntegratorWeights) -> Tensor:
    """Softlog each branch distribution, combine per class, softmax.

    ``branch_probs`` is a list of (N, K) tensors (or arrays).
    """
    probs = [p if isinstance(p, Tensor) else Tensor(np.atleast_2d(p)) for p in branch_probs]
    k = probs[0].shape[-1]
    for p in probs:
        if p.shape[-1] != k:
            raise ShapeError("integrator", *[q.shape for q in probs], detail="class-count mismatch")
    weights.check(len(probs), k)
    logs = [ops.softlog(p) for p in probs]
    if weights.mode == SCALAR:
        logits = ops.affine_combine(logs, weights.weights)
    else:
        logits = ops.matmul(ops.concat(logs, axis=-1), ops.transpose(weights.weights))
    return ops.softmax(logits, axis=-1)


class SoftlogIntegrator(Module):
    def __init__(self, branches: tuple[int, ...], classes: int, mode: str = DENSE):
        self.spec = LayerSpec(INTEGRATOR, branches=tuple(branches))
        self.branches = tuple(branches)
        self.mode = mode
        shape = (len(branches),) if mode == SCALAR else (classes, len(branches) * classes)
        self.weight = _param(shape, "weight")

    def forward(self, branch_probs):
        return softlog_softmax_integrator(branch_probs, IntegratorWeights(self.mode, self.weight))
