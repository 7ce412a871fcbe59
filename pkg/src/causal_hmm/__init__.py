"""Causal hidden Markov model toolkit: disentangled sequential VAE,
structural-causal simulator, and out-of-distribution evaluation harness."""

from .simulator import (ScmParams, PopulationSpec, SequenceSample, DatasetBundle,
                        sample_sequence, sample_dataset, check_rank_condition,
                        benchmark_params, default_params, linear_gaussian_params)
from .dataio import write_dataset, read_dataset
from .model import CausalHmm, ModelConfig, DiagGaussian, LatentState, reparameterize
from .objective import (ElboBreakdown, kl_diag_gaussian, predictive_log_prob,
                        total_objective)
from .trainer import TrainConfig, train, save_checkpoint, load_checkpoint
from .evaluation import (accuracy, auc, block_alignment, predict,
                         probe_robustness, saliency, two_proportion_z_test)
from .baselines import BaselineKind, build_baseline

__version__ = "0.1.0"
