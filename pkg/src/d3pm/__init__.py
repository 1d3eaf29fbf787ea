"""Discrete-state diffusion: structured categorical corruption processes,
their closed forms and schedules, the clean-datum-parameterized reverse
process, variational losses, and a desk-scale training/sampling loop, all
backed by brute-force verification oracles."""

from .data import (Dataset, gen_swiss_roll, gen_synthetic, load_char_corpus,
                   load_checkpoint, save_checkpoint)
from .denoiser import (Adam, DenoiserConfig, MicroDenoiser, SGD, grad_check,
                       predict_logits, train_step)
from .estimator import DiscreteDiffusionModel, reverse_step_grid
from .exceptions import (CheckpointError, D3PMError, DataError,
                         InvalidSpecError, MIGridError, ScheduleError,
                         TrainingDivergedError, UnreachableStateError,
                         UnsupportedFamilyError)
from .loss import LossReport, hybrid_loss, mlm_identity_check, vb_terms
from .process import (Categorical, ForwardProcess, SequenceBatch,
                      marginal_dist, posterior_dist, sample_forward)
from .reverse import (LogisticHead, ancestral_sample, kstep_dist,
                      logistic_logits, reverse_dist)
from .schedule import (Schedule, beta_from_alpha, make_schedule, mi_fraction,
                       mi_schedule)
from .transition import (LowRankCumulative, TransitionSpec, build_embedding_rate,
                         build_transition, cumulative_product,
                         lowrank_cumulative, mat_exp, precompute_pow2_exponents)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Categorical", "CheckpointError", "D3PMError", "DataError",
    "Dataset", "DenoiserConfig", "DiscreteDiffusionModel", "ForwardProcess",
    "InvalidSpecError", "LogisticHead", "LossReport", "LowRankCumulative",
    "MIGridError", "MicroDenoiser", "SGD", "Schedule", "ScheduleError",
    "SequenceBatch", "TrainingDivergedError", "TransitionSpec",
    "UnreachableStateError", "UnsupportedFamilyError", "ancestral_sample",
    "beta_from_alpha", "build_embedding_rate", "build_transition",
    "cumulative_product", "gen_swiss_roll", "gen_synthetic", "grad_check",
    "hybrid_loss", "kstep_dist", "load_char_corpus", "load_checkpoint",
    "logistic_logits", "lowrank_cumulative", "make_schedule", "marginal_dist",
    "mat_exp", "mi_fraction", "mi_schedule", "mlm_identity_check",
    "posterior_dist", "precompute_pow2_exponents", "predict_logits",
    "reverse_dist", "reverse_step_grid", "sample_forward", "save_checkpoint",
    "train_step", "vb_terms",
]
