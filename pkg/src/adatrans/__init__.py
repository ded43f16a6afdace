"""Adaptive multi-source estimation of individual treatment effects."""
from .auxiliary import (AuxConfig, OutcomeRegressor, PropensityModel, fit_outcome,
                        fit_propensity, predict_outcome, predict_propensity,
                        sample_outcome, sample_treatment)
from .config import ExperimentConfig, load_config
from .confounder import (ConfounderConfig, ConfounderModel, StructuralConfig, fit,
                         grad_J, neg_elbo, objective_J)
from .data import (DataSchema, MultiSourceDataset, OutcomeKind, PopulationData, SplitSpec,
                   load_dataset, load_manifest, save_dataset, split_target, validate)
from .estimator import EffectEstimate, Models, estimate_ate, estimate_ite, naive_ate
from .harness import emit_plotdata, run_experiment
from .kernels import TransferFactors
from .metrics import MetricResult, ate_error, sqrt_pehe
from .persist import load_models, save_models

__version__ = "0.1.0"
