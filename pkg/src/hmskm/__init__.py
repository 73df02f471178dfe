"""Simulation and sequential inference for reaction systems with a hidden
Markov-modulated rate factor."""

from .errors import (ConfigurationError, DegenerateStateError, FilterCollapseError, HMSKMError,
                     ImpossibleEventError, ModelArgumentError, PreconditionError, SurvivalUnderflowError)
from .kinetics import (LOG_ZERO, EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, SystemState,
                       make_law, path_log_likelihood, propensity, reaction_type_likelihood, register_law,
                       total_rate)
from .sis import SISParams, build_sis, simulate_sis
from .simulate import SimConfig, next_transition, simulate_path

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DegenerateStateError", "FilterCollapseError", "HMSKMError", "ImpossibleEventError",
    "ModelArgumentError", "PreconditionError", "SurvivalUnderflowError",
    "LOG_ZERO", "EventPath", "RateParams", "RateTies", "ReactionSystem", "RegimeModel", "SystemState", "make_law",
    "path_log_likelihood", "propensity", "reaction_type_likelihood", "register_law", "total_rate",
    "SISParams", "build_sis", "simulate_sis", "SimConfig", "next_transition", "simulate_path",
]
