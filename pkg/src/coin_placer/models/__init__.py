"""Classifiers that map task features to catalog decisions."""

from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, load_gcn, load_mlp, save_gcn, save_mlp
from .dense import ShapeMismatch, cross_entropy, softmax
from .gcn import (
    EmptyDataset,
    FoldResult,
    GcnParams,
    TrainConfig,
    batch_graphs,
    gcn_backward,
    gcn_forward,
    gcn_loss,
    gcn_predict,
    init_gcn,
    standardize_graph,
    train_gcn,
)
from .mlp import MlpParams, init_mlp, mlp_backward, mlp_forward, mlp_predict, train_mlp
from .tree import TreeModel, dt_fit, dt_predict, tree_from_json, tree_to_json

__all__ = [
    "AdamState", "adam_step", "CheckpointError", "load_gcn", "load_mlp", "save_gcn", "save_mlp",
    "ShapeMismatch", "cross_entropy", "softmax", "EmptyDataset", "FoldResult", "GcnParams",
    "TrainConfig", "batch_graphs", "gcn_backward", "gcn_forward", "gcn_loss", "gcn_predict",
    "init_gcn", "standardize_graph", "train_gcn", "MlpParams", "init_mlp", "mlp_backward",
    "mlp_forward", "mlp_predict", "train_mlp", "TreeModel", "dt_fit", "dt_predict",
    "tree_from_json", "tree_to_json",
]
