"""Supervised contrastive parallel learning on a small numpy autodiff engine."""

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, finite_diff_check
from .data import Dataset, ViewBatch, gen_blobs, gen_images, load_csv, load_idx
from .losses import cross_entropy, supcon_loss, supcon_loss_alg1
from .network import NetworkTemplate, ScplNetwork, build_bp_network, build_from_template
from .schedule import WorkloadSpec, build_task_graph, bubble_ratio, simulate
from .trainers import MetricsRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "MetricsRecord", "NetworkTemplate", "NonFiniteError", "ScplNetwork", "ShapeError",
    "Tape", "Tensor", "TrainConfig", "ViewBatch", "WorkloadSpec", "build_bp_network",
    "build_from_template", "build_task_graph", "bubble_ratio", "cross_entropy", "finite_diff_check",
    "gen_blobs", "gen_images", "load_csv", "load_idx", "simulate", "supcon_loss", "supcon_loss_alg1",
    "train",
]
