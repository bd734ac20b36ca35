"""Global-local permutation-equivariant networks and centralized value-decomposition MARL."""

__version__ = "0.1.0"

from .autodiff import Adam, Tensor, no_grad
from .estimators import FlatMlpRegressor, GlpeRegressor
from .layers import (GlpeLayer, GlpeNetwork, GruGlpeLayer, LocalLayer, PlainMlp, build_cpe_policy,
                     build_distributed_policy, check_size_bound, param_count)

__all__ = [
    "Adam", "Tensor", "no_grad", "FlatMlpRegressor", "GlpeRegressor", "GlpeLayer", "GlpeNetwork",
    "GruGlpeLayer", "LocalLayer", "PlainMlp", "build_cpe_policy", "build_distributed_policy",
    "check_size_bound", "param_count",
]
