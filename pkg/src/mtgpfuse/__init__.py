"""Multi-task Gaussian processes with process-convolution cross-covariances."""

from .data import (
    ModelArchive,
    TaskDataset,
    gen_correlated_field,
    gen_sine_demo,
    load_csv,
    load_model,
    save_model,
)
from .evaluation import BlockSpec, CvConfig, block_partition, run_cross_validation
from .gp import GpModel, Posterior
from .kernels import KernelFamily, KernelParams, TaskSimilarity
from .multitask import MtgpModel
from .training import TrainConfig, fit, initial_gp, initial_mtgp

__all__ = [
    "BlockSpec", "CvConfig", "GpModel", "KernelFamily", "KernelParams", "ModelArchive",
    "MtgpModel", "Posterior", "TaskDataset", "TaskSimilarity", "TrainConfig", "block_partition",
    "fit", "gen_correlated_field", "gen_sine_demo", "initial_gp", "initial_mtgp", "load_csv",
    "load_model", "run_cross_validation", "save_model",
]
__version__ = "0.1.0"
