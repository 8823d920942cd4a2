"""Branched residual networks on a small numpy autodiff core.

A shared low-level trunk feeds several independently parameterized upper
branches whose softmax outputs are ensembled at inference. Training uses
label smoothing, SGD with momentum and a step schedule, and a seeded
image-augmentation pipeline (crop, flip, color jitter, PCA color noise,
normalization).
"""

from .augment import (AugmentConfig, PcaBasis, RngStream, augment_pipeline,
                      color_jitter, epoch_shuffle, fit_pca_basis,
                      horizontal_flip, normalize, pca_noise, random_crop)
from .data import (Checkpoint, Dataset, SyntheticSpec, generate_synthetic,
                   load_checkpoint, load_cifar10_binary, read_ppm,
                   save_checkpoint, write_ppm)
from .evaluation import (EvalReport, ensemble_probs, evaluate,
                         relative_improvement, top_k_error)
from .gradcheck import FiniteDiffReport, finite_diff_check
from .model import (BlockTopology, BranchedNetConfig, BranchedNetwork,
                    LayerCounts, ParamReport, block_topology,
                    build_branched_net, count_parameters,
                    forward_all_branches, layer_counts, mini_config,
                    paper_scale_config)
from .tensor import (ShapeError, Tape, Tensor, batch_norm2d, conv2d,
                     global_avg_pool, linear, pool2d, relu, residual_add,
                     reverse_pass, softmax, sum_all, weighted_sum)
from .training import (OptimizerState, TrainConfig, TrainHistory,
                       TrainingDivergedError, combined_branch_loss,
                       history_csv, lr_at_epoch, restore_network,
                       sgd_momentum_step, smooth_label_matrix, smooth_labels,
                       smoothed_cross_entropy, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "PcaBasis", "RngStream", "augment_pipeline",
    "color_jitter", "epoch_shuffle", "fit_pca_basis", "horizontal_flip",
    "normalize", "pca_noise", "random_crop",
    "Checkpoint", "Dataset", "SyntheticSpec", "generate_synthetic",
    "load_checkpoint", "load_cifar10_binary", "read_ppm", "save_checkpoint",
    "write_ppm",
    "EvalReport", "ensemble_probs", "evaluate", "relative_improvement",
    "top_k_error",
    "FiniteDiffReport", "finite_diff_check",
    "BlockTopology", "BranchedNetConfig", "BranchedNetwork", "LayerCounts",
    "ParamReport", "block_topology", "build_branched_net", "count_parameters",
    "forward_all_branches", "layer_counts", "mini_config", "paper_scale_config",
    "ShapeError", "Tape", "Tensor", "batch_norm2d", "conv2d",
    "global_avg_pool", "linear", "pool2d", "relu", "residual_add",
    "reverse_pass", "softmax", "sum_all", "weighted_sum",
    "OptimizerState", "TrainConfig", "TrainHistory", "TrainingDivergedError",
    "combined_branch_loss", "history_csv", "lr_at_epoch", "restore_network",
    "sgd_momentum_step", "smooth_label_matrix", "smooth_labels",
    "smoothed_cross_entropy", "train",
]
