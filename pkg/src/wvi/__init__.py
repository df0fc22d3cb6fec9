"""Optimal-transport variational inference.

Differentiable entropic transport divergences (via backpropagation
through the scaling iterations), a family of transport cost functionals
over joint (x, z) samples, and a small autoencoder stack trained by
minimizing them.
"""

from .autodiff import Adam, DomainError, Parameter, ShapeError, Tape, TapeError, Tensor
from .costs import (CostFunctionalSpec, JointBatch, WeightVector,
                    assemble_total_cost_matrix, f_divergence_mc, f_term,
                    latent_ae_cost, observable_ae_cost, pullback_cost)
from .data import DatasetHandle, load_mnist_idx, split_train_val, synth_dataset
from .metrics import (MetricReport, PerturbationSummary, latent_error,
                      perturbation_harness, reconstruction_error, sample_quality)
from .models import DenseNet, ModelPair, load_checkpoint, save_checkpoint
from .ot import (CostMatrix, Coupling, DiscreteDistribution, SinkhornConfig,
                 SinkhornUnderflowError, build_cost_matrix, exact_ot_oracle,
                 sinkhorn_plan, sinkhorn_value)
from .trainer import (LossReport, TrainConfig, TrainingAbort, debiased_loss,
                      mc_wasserstein_loss, train_run, train_step)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CostFunctionalSpec", "CostMatrix", "Coupling", "DatasetHandle",
    "DenseNet", "DiscreteDistribution", "DomainError", "JointBatch",
    "LossReport", "MetricReport", "ModelPair", "Parameter",
    "PerturbationSummary", "ShapeError", "SinkhornConfig",
    "SinkhornUnderflowError", "Tape", "TapeError", "Tensor", "TrainConfig",
    "TrainingAbort", "WeightVector", "assemble_total_cost_matrix",
    "build_cost_matrix", "debiased_loss", "exact_ot_oracle", "f_divergence_mc",
    "f_term", "latent_ae_cost", "latent_error", "load_checkpoint",
    "load_mnist_idx", "mc_wasserstein_loss", "observable_ae_cost",
    "perturbation_harness", "pullback_cost", "reconstruction_error",
    "sample_quality", "save_checkpoint", "sinkhorn_plan", "sinkhorn_value",
    "split_train_val", "synth_dataset", "train_run", "train_step",
]
