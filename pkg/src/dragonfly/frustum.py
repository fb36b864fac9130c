"""Frustum-shaped convolution branches and the 17-head DRAGONFLY ensemble."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import (
    CONV2D,
    DENSE,
    DSC,
    BatchNorm,
    Conv2D,
    DenseClassifier,
    DepthwiseSeparable,
    LayerSpec,
    Module,
    Pool,
    ReLU,
    Softmax,
    SoftlogIntegrator,
    parse_layer_notation,
)
from .tensor import ShapeError, Tensor

FRUSTUMS: dict[str, tuple[int, ...]] = {
    "cylindric-wide": (128,),
    "cylindric-elongated": (32, 32, 32),
    "contractive": (96, 64, 32),
    "hyperbolic": (80, 48, 80),
    "ovoid": (48, 80, 48),
    "expansive": (32, 64, 96),
}

# branch id -> (conv kind, frustum, final average pool, final max pool)
CANONICAL_BRANCHES: dict[int, tuple[str, str, str, str]] = {}
for _offset, _kind in ((0, CONV2D), (6, DSC)):
    for _i, (_shape, _avg, _max) in enumerate((
        ("cylindric-wide", "F7[v3]", "G11[v5]"),
        ("cylindric-elongated", "F5[v1]", "G5[v2]"),
        ("contractive", "F5[v1]", "G5[v2]"),
        ("hyperbolic", "F5[v1]", "G7[v3]"),
        ("ovoid", "F5[v1]", "G7[v3]"),
        ("expansive", "F5[v2]", "G5[v2]"),
    )):
        CANONICAL_BRANCHES[_offset + _i + 1] = (_kind, _shape, _avg, _max)

BLOCK_POOL = "G5[v2]"

# integrator id -> consumed head ids
WIRING: dict[int, tuple[int, ...]] = {
    13: (1, 2),
    14: (3, 4, 5, 6),
    15: (7, 8),
    16: (9, 10, 11, 12),
    17: tuple(range(1, 17)),
}

HEADS = tuple(range(1, 18))


class ExtentError(ShapeError):
    pass


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def canonical_frustum(shape: str, width_scale: float = 1.0) -> list[int]:
    """Channel list of a canonical frustum, scaled and rounded to the nearest integer."""
    if shape not in FRUSTUMS:
        raise ValueError(f"unknown frustum shape {shape!r}; expected one of {sorted(FRUSTUMS)}")
    if not width_scale > 0:
        raise ValueError(f"width_scale must be positive, got {width_scale}")
    out = [_round_half_up(c * width_scale) for c in FRUSTUMS[shape]]
    if min(out) < 1:
        raise ValueError(f"width_scale {width_scale} leaves a {shape} layer with zero channels")
    return out


@dataclass(frozen=True)
class BranchSpec:
    id: int
    conv_kind: str
    shape: str
    width_scale: float = 0.125
    block_pool: LayerSpec = field(default_factory=lambda: parse_layer_notation(BLOCK_POOL))
    final_pools: tuple[LayerSpec, LayerSpec] = ()

    @classmethod
    def canonical(cls, branch_id: int, width_scale: float = 0.125, **overrides) -> "BranchSpec":
        kind, shape, avg, mx = CANONICAL_BRANCHES[branch_id]
        spec = cls(branch_id, kind, shape, width_scale,
                   final_pools=(parse_layer_notation(avg), parse_layer_notation(mx)))
        return replace(spec, **overrides) if overrides else spec

    @property
    def channels(self) -> list[int]:
        return canonical_frustum(self.shape, self.width_scale)

    def notation(self) -> list[str]:
        """Layer sequence written as table tokens, for configs and audit trails."""
        conv = "C" if self.conv_kind == CONV2D else "D"
        tokens = []
        chans = self.channels
        for i, c in enumerate(chans):
            tokens.append(f"{conv}3[{c}]")
            tokens.append("BatchNorm")
            if i < len(chans) - 1:
                tokens += [self.block_pool.format(), "ReLU"]
        tokens += [p.format() for p in self.final_pools]
        tokens += ["DCN", "Softmax"]
        return tokens

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": f"N{self.id}",
            "conv": "2D-C" if self.conv_kind == CONV2D else "DSC",
            "shape": self.shape,
            "width_scale": self.width_scale,
            "channels": self.channels,
            "block_pool": self.block_pool.format(),
            "final_pools": [p.format() for p in self.final_pools],
            "layers": self.notation(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BranchSpec":
        kind = CONV2D if d["conv"] in ("2D-C", CONV2D) else DSC
        return cls(
            int(d["id"]), kind, d["shape"], float(d["width_scale"]),
            block_pool=parse_layer_notation(d["block_pool"]),
            final_pools=tuple(parse_layer_notation(t) for t in d["final_pools"]),
        )


class Branch(Module):
    """conv -> BatchNorm [-> max pool -> ReLU] per frustum section, then final pools, DCN, softmax."""

    def __init__(self, spec: BranchSpec, classes: int, input_dims: tuple[int, int, int],
                 padding: str = "same"):
        self.spec = spec
        h, w, c = input_dims
        conv_cls = Conv2D if spec.conv_kind == CONV2D else DepthwiseSeparable
        self.layers: list[Module] = []
        chans = spec.channels
        name = f"N{spec.id}"
        for i, out_c in enumerate(chans):
            self.layers.append(conv_cls(c, out_c, 3, padding=padding))
            h, w = _conv_extent(h, w, 3, padding, f"{name} block {i + 1} conv")
            self.layers.append(BatchNorm(out_c))
            c = out_c
            if i < len(chans) - 1:
                self.layers.append(Pool(spec.block_pool, padding))
                h, w = _pool_extent(h, w, spec.block_pool, padding, f"{name} block {i + 1} {spec.block_pool}")
                self.layers.append(ReLU())
        for p in spec.final_pools:
            self.layers.append(Pool(p, padding))
            h, w = _pool_extent(h, w, p, padding, f"{name} final {p}")
        self.feature_shape = (c, h, w)
        self.dcn = DenseClassifier(c * h * w, classes)
        self.head = Softmax()

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.head(self.dcn(x))

    def conv_parameter_count(self) -> int:
        return int(sum(p.data.size for layer in self.layers
                       if isinstance(layer, (Conv2D, DepthwiseSeparable))
                       for p in layer.parameters()))

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _conv_extent(h, w, k, padding, stage):
    if padding == "same":
        return h, w
    if h < k or w < k:
        raise ExtentError(stage, (h, w), (k, k), detail=f"extent underflow at {stage}")
    return h - k + 1, w - k + 1


def _pool_extent(h, w, spec: LayerSpec, padding, stage):
    m, s = spec.size, spec.count
    if padding == "same":
        return -(-h // s), -(-w // s)
    if h < m or w < m:
        raise ExtentError(stage, (h, w), (m, m), detail=f"extent underflow at {stage}")
    return (h - m) // s + 1, (w - m) // s + 1


def build_branch(spec: BranchSpec, classes: int, input_dims=(32, 32, 1), padding: str = "same") -> Branch:
    return Branch(spec, classes, tuple(input_dims), padding)


@dataclass
class EnsembleSpec:
    classes: int
    input_dims: tuple[int, int, int] = (32, 32, 1)
    width_scale: float = 0.125
    padding: str = "same"
    integrator_mode: str = DENSE
    branches: list[BranchSpec] = field(default_factory=list)
    wiring: dict[int, tuple[int, ...]] = field(default_factory=lambda: dict(WIRING))

    def __post_init__(self):
        self.input_dims = tuple(int(v) for v in self.input_dims)
        if not self.branches:
            self.branches = [BranchSpec.canonical(b, self.width_scale) for b in range(1, 13)]

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "input_dims": list(self.input_dims),
            "width_scale": self.width_scale,
            "padding": self.padding,
            "integrator_mode": self.integrator_mode,
            "branches": [b.to_dict() for b in self.branches],
            "wiring": {f"N{k}": [f"N{b}" for b in v] for k, v in self.wiring.items()},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        wiring = {int(k.lstrip("N")): tuple(int(b.lstrip("N")) for b in v)
                  for k, v in d.get("wiring", {}).items()} or dict(WIRING)
        return cls(
            classes=int(d["classes"]),
            input_dims=tuple(d["input_dims"]),
            width_scale=float(d["width_scale"]),
            padding=d.get("padding", "same"),
            integrator_mode=d.get("integrator_mode", DENSE),
            branches=[BranchSpec.from_dict(b) for b in d["branches"]],
            wiring=wiring,
        )


class Dragonfly(Module):
    """Twelve frustum branches, four sub-community integrators and the global integrator.

    ``forward`` returns the 17 head outputs (each (N, K)) from one pass.
    """

    def __init__(self, spec: EnsembleSpec):
        self.spec = spec
        self.branches = [build_branch(b, spec.classes, spec.input_dims, spec.padding)
                         for b in spec.branches]
        self.integrators = [SoftlogIntegrator(spec.wiring[h], spec.classes, spec.integrator_mode)
                            for h in sorted(spec.wiring)]
        self._integrator_ids = sorted(spec.wiring)

    def forward(self, x):
        heads: dict[int, Tensor] = {}
        for b, branch in zip(self.spec.branches, self.branches):
            heads[b.id] = branch(x)
        for hid, integ in zip(self._integrator_ids, self.integrators):
            heads[hid] = integ([heads[i] for i in integ.branches])
        return [heads[h] for h in sorted(heads)]

    def head_ids(self) -> list[int]:
        return [b.id for b in self.spec.branches] + list(self._integrator_ids)


def build_dragonfly(classes: int, input_dims=(32, 32, 1), width_scale: float = 0.125,
                    integrator_mode: str = DENSE, padding: str = "same") -> tuple[EnsembleSpec, Dragonfly]:
    spec = EnsembleSpec(classes, tuple(input_dims), width_scale, padding, integrator_mode)
    return spec, Dragonfly(spec)


def to_nchw(batch) -> Tensor:
    """Dataset images (N, H, W, C) -> model input (N, C, H, W)."""
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def forward_all(graph: Dragonfly, batch, chunk: int = 256) -> np.ndarray:
    """All 17 head distributions for a batch of (N, H, W, C) images, shape (17, N, K).

    Runs in evaluation mode (running batch-norm statistics); the graph's
    previous train/eval mode is restored afterwards.
    """
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if tuple(arr.shape[1:]) != tuple(graph.spec.input_dims):
        raise ShapeError("forward_all", arr.shape, graph.spec.input_dims,
                         detail="batch extent must match input_dims")
    was_training = graph.training
    graph.eval()
    try:
        parts = []
        for start in range(0, arr.shape[0], chunk):
            outs = graph(to_nchw(arr[start:start + chunk]))
            parts.append(np.stack([o.data for o in outs]))
        return np.concatenate(parts, axis=1)
    finally:
        graph.train(was_training)

