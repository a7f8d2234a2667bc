"""Anisotropic InfoNCE on synthetic hypersphere data-generating processes."""
from .config import DEFAULTS, SweepSpec, TrainConfig, build_config, merged
from .dgp import DgpSpec, GeneratorSpec, LatentBatch, ObservationBatch, make_generator, sample_latent_batch
from .evaluation import EvalReport, compare_lambda, evaluate_latents, fit_linear_map, orthogonality_residual
from .losses import aninfonce_loss, bayes_optimal_loss, ensemble_loss, infonce_loss
from .nn import LearnableConcentration, MlpNetwork, make_encoder
from .rng import RngStream
from .sphere import ConcentrationMatrix, VmfParams, sample_conditional, sample_uniform_sphere, sample_vmf
from .training import MetricRow, Trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "DEFAULTS",
    "ConcentrationMatrix",
    "DgpSpec",
    "EvalReport",
    "GeneratorSpec",
    "LatentBatch",
    "LearnableConcentration",
    "MetricRow",
    "MlpNetwork",
    "ObservationBatch",
    "RngStream",
    "SweepSpec",
    "TrainConfig",
    "Trainer",
    "VmfParams",
    "aninfonce_loss",
    "bayes_optimal_loss",
    "build_config",
    "compare_lambda",
    "ensemble_loss",
    "evaluate_latents",
    "fit_linear_map",
    "infonce_loss",
    "make_encoder",
    "make_generator",
    "merged",
    "orthogonality_residual",
    "run_training",
    "sample_conditional",
    "sample_latent_batch",
    "sample_uniform_sphere",
    "sample_vmf",
]
