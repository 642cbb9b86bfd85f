"""Multitask learning over per-annotator labels with loss-based label correction."""

__version__ = "0.1.0"

from .annotations import (AnnotationMatrix, Dataset, annotation_variance, compute_majority,
                          load_dataset, save_dataset, validate)
from .kernels import BACKEND as KERNEL_BACKEND
from .losses import (LossSpec, class_balance_reg, detach_guess, entropy_penalty, loss_ce,
                     loss_lc, loss_mlc, loss_mt)
from .metrics import (MetricsReport, annotator_accuracy, assemble_report, precision_recall_f1,
                      prediction_variance)
from .mixture import (LossLedger, LossMixtureModel, MixtureParams, agree_disagree_split,
                      fit_beta_mixture_em, normalize_losses, posterior_weight)
from .model import (Batch, Dims, ModelParams, compute_gradients, forward, forward_mixup,
                    init_model)
from .synth import NoiseRecord, SynthConfig, generate_synthetic, inject_noise
from .train import TrainConfig, TrainHistory, run_psi_sweep, sgd_step, train

__all__ = [
    "AnnotationMatrix", "Batch", "Dataset", "Dims", "KERNEL_BACKEND", "LossLedger",
    "LossMixtureModel", "LossSpec", "MetricsReport", "MixtureParams", "ModelParams",
    "NoiseRecord", "SynthConfig", "TrainConfig", "TrainHistory", "agree_disagree_split",
    "annotation_variance", "annotator_accuracy", "assemble_report", "class_balance_reg",
    "compute_gradients", "compute_majority", "detach_guess", "entropy_penalty",
    "fit_beta_mixture_em", "forward", "forward_mixup", "generate_synthetic", "init_model",
    "inject_noise", "load_dataset", "loss_ce", "loss_lc", "loss_mlc", "loss_mt",
    "normalize_losses", "posterior_weight", "precision_recall_f1", "prediction_variance",
    "run_psi_sweep", "save_dataset", "sgd_step", "train", "validate",
]
