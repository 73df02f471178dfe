"""Exception types raised across the toolkit."""


class HMSKMError(Exception):
    """Base class for all toolkit errors."""


class ModelArgumentError(HMSKMError, ValueError):
    """Reaction or regime index out of range, or a malformed model."""


class DegenerateStateError(HMSKMError, ValueError):
    """Total reaction rate is zero where a positive rate is required."""


class ImpossibleEventError(HMSKMError, ValueError):
    """An observed reaction has zero propensity under every regime."""


class PreconditionError(HMSKMError, ValueError):
    """An operation was called on data that violates its precondition."""


class SurvivalUnderflowError(HMSKMError, ArithmeticError):
    """Survival mass of a drift step underflowed; subdivide the interval."""


class FilterCollapseError(HMSKMError, RuntimeError):
    """All particle log-weights are log-zero."""

    def __init__(self, message, *, event_index=None, time=None):
        super().__init__(message)
        self.event_index = event_index
        self.time = time


class ConfigurationError(HMSKMError, ValueError):
    """A policy rule or experiment is missing a required input."""
