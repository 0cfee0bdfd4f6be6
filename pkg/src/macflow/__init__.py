"""Flow matching with pluggable minibatch couplings on small Gaussian-mixture tasks."""

from .coupling import (
    CouplingBatch, batch_ot_coupling, hungarian_assign, mac_full_coupling, mac_topk_coupling,
    random_coupling, select_topk, sinkhorn, sinkhorn_coupling,
)
from .distributions import EmpiricalDistribution, GaussianMixture, four_corner_source, two_mode_target
from .estimator import FlowMatcher
from .exceptions import ConfigError, NumericalAbort
from .metrics import straightness, w2_exact, w2_sliced
from .net import VectorFieldNet
from .sampler import euler_sample, generate, shortcut_sample
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CouplingBatch", "EmpiricalDistribution", "FlowMatcher", "GaussianMixture",
    "NumericalAbort", "TrainConfig", "VectorFieldNet", "batch_ot_coupling", "euler_sample",
    "evaluate", "four_corner_source", "generate", "hungarian_assign", "mac_full_coupling",
    "mac_topk_coupling", "random_coupling", "select_topk", "shortcut_sample", "sinkhorn",
    "sinkhorn_coupling", "straightness", "train", "two_mode_target", "w2_exact", "w2_sliced",
]
