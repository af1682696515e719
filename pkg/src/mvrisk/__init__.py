"""Unsupervised risk estimation for multi-view models via the method of moments."""

__version__ = "0.1.0"

from .decomposition import DecompositionConfig, PlugInEstimate, decompose, decompose_arrays
from .errors import (AmplificationError, DegenerateScaleError, IllConditionedError, InputError,
                     MvRiskError, NumericError, UnsupportedError)
from .hmm import HmmModel, forward_backward, hmm_risk
from .learning import LearnConfig, estimate_mean_features, learn_general, learn_logistic, seed_alignment
from .matching import best_permutation, max_weight_matching
from .models import build_builtin_model, load_model, save_model
from .moments import MomentSet, accumulate_moments
from .risk import (RiskEstimate, estimate_risk, exponential_risk, mediated_risk,
                   risk_from_components)

__all__ = [
    "DecompositionConfig", "PlugInEstimate", "decompose", "decompose_arrays",
    "AmplificationError", "DegenerateScaleError", "IllConditionedError", "InputError",
    "MvRiskError", "NumericError", "UnsupportedError",
    "HmmModel", "forward_backward", "hmm_risk",
    "LearnConfig", "estimate_mean_features", "learn_general", "learn_logistic", "seed_alignment",
    "best_permutation", "max_weight_matching",
    "build_builtin_model", "load_model", "save_model",
    "MomentSet", "accumulate_moments",
    "RiskEstimate", "estimate_risk", "exponential_risk", "mediated_risk", "risk_from_components",
]
