"""Transductive few-shot classification with conditional transport and a learned class prior."""

from .baselines import SinkhornConfig, nearest_prototype, run_ot_uniform, sinkhorn_plan
from .episodes import Episode, EpisodeSpec, FeatureBank, SyntheticConfig, load_feature_bank
from .harness import EvalReport, RunConfig, evaluate, sweep_alpha
from .preprocess import PreprocessConfig, adapt_episode
from .solver import EpisodeResult, PutmConfig, run_putm
from .transport import EStepConfig

__version__ = "0.1.0"

__all__ = [
    "EStepConfig",
    "Episode",
    "EpisodeResult",
    "EpisodeSpec",
    "EvalReport",
    "FeatureBank",
    "PreprocessConfig",
    "PutmConfig",
    "RunConfig",
    "SinkhornConfig",
    "SyntheticConfig",
    "adapt_episode",
    "evaluate",
    "load_feature_bank",
    "nearest_prototype",
    "run_ot_uniform",
    "run_putm",
    "sinkhorn_plan",
    "sweep_alpha",
]
