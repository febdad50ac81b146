"""Differentiable RoI projection operators and a desk-scale multi-task trainer."""

from .data import DataConfig, Scene, generate_dataset, load_dataset, propose_rois
from .evaluate import ExperimentReport, average_precision, run_ablation, run_comparison
from .model import Model, NetworkConfig, build_network, forward_detection, forward_event
from .roi import (
    CombinedFeatureMap,
    PerRoIFeatureMap,
    RoI,
    Selection,
    batch_pool,
    build_combined_map,
    roi_pool,
    roi_project,
    select_rois,
)
from .tensor import Tensor, no_grad
from .training import TrainConfig, Trainer, assemble_batch, assign_labels, train_single_task

__version__ = "0.1.0"

__all__ = [
    "CombinedFeatureMap",
    "DataConfig",
    "ExperimentReport",
    "Model",
    "NetworkConfig",
    "PerRoIFeatureMap",
    "RoI",
    "Scene",
    "Selection",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "assemble_batch",
    "assign_labels",
    "average_precision",
    "batch_pool",
    "build_combined_map",
    "build_network",
    "forward_detection",
    "forward_event",
    "generate_dataset",
    "load_dataset",
    "no_grad",
    "propose_rois",
    "roi_pool",
    "roi_project",
    "run_ablation",
    "run_comparison",
    "select_rois",
    "train_single_task",
]
