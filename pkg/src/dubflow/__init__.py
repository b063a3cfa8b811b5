"""Discrete flow matching over factorized speech-token grids, with alignment
losses and a synthetic dubbing world that has an exactly known target law."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DenoiserOutputError,
    DomainError,
    DubflowError,
    InconsistentEvidenceError,
    ShapeError,
    SingularityError,
    TrainingDivergedError,
)
from .tokens import ABSENT, ConditioningContext, FactorizedTokens, GenerativeTarget, StreamLayout
from .dfm import PathState, Scheduler, corrupt, dfm_loss, euler_step, sample, sample_batch, velocity
from .laws import JointLaw, ProductLaw
from .denoiser import ExactPosteriorDenoiser, TabularDenoiser, UniformDenoiser, tabular_train
from .alignment import DurationTable, build_alignment_matrix, contrastive_alignment_loss, mas
from .losses import LossWeights, ctc_loss, total_loss
from .toyworld import ToyConfig, ToyCorpus, gen_corpus, true_conditional

__all__ = [name for name in dir() if not name.startswith("_")]
