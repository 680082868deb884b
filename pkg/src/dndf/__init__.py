"""Deep neural decision forests: soft differentiable trees on a learned embedding."""

from .forest import (
    Forest,
    TreeTopology,
    decision_probability,
    empirical_risk,
    forest_predict,
    loss_gradient_wrt_activations,
    route,
    sample_loss,
    tree_predict,
    update_leaf_distributions,
)
from .model import DNDFModel
from .trainer import Dataset, TrainConfig, evaluate, k_fold, train, tree_sweep

__version__ = "0.1.0"

__all__ = [
    "DNDFModel",
    "Dataset",
    "Forest",
    "TrainConfig",
    "TreeTopology",
    "decision_probability",
    "empirical_risk",
    "evaluate",
    "forest_predict",
    "k_fold",
    "loss_gradient_wrt_activations",
    "route",
    "sample_loss",
    "train",
    "tree_predict",
    "tree_sweep",
    "update_leaf_distributions",
]
