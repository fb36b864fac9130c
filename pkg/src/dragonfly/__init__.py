"""Softlog-softmax ensemble learning on a from-scratch numpy autodiff engine."""

from .softlog import mean_sld, safe_cross_entropy, sld, softlog, softlog_cross_entropy, softlog_entropy, softlog_relative_entropy
from .metrics import AbilityWeights, PerfTensor, ability, perf_tensor
from .frustum import EnsembleSpec, build_dragonfly, forward_all

__version__ = "0.1.0"

__all__ = [
    "softlog", "safe_cross_entropy", "softlog_entropy", "softlog_cross_entropy",
    "softlog_relative_entropy", "sld", "mean_sld",
    "PerfTensor", "AbilityWeights", "perf_tensor", "ability",
    "EnsembleSpec", "build_dragonfly", "forward_all",
]
