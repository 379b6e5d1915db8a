"""Tail-risk training for meta-learning.

Trains small regression models under four risk-minimization principles
(expected risk, worst-in-batch, two-stage CVaR screening, softmax risk
reweighting) and evaluates them with Average / Worst / CVaR metrics.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradVector,
    MetaGradient,
    NonFiniteError,
    ParamLayout,
    ParamVector,
    Tensor,
    finite_difference_gradient,
    gradient,
    meta_gradient,
)
from .models import CNPSpec, ModelSpec, init_params, load_checkpoint, save_checkpoint
from .risk import PrincipleConfig, RiskBatch

__all__ = [
    "GradVector",
    "MetaGradient",
    "NonFiniteError",
    "ParamLayout",
    "ParamVector",
    "Tensor",
    "finite_difference_gradient",
    "gradient",
    "meta_gradient",
    "CNPSpec",
    "ModelSpec",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "PrincipleConfig",
    "RiskBatch",
    "__version__",
]
