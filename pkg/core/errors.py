"""
Exception hierarchy for jump-diffusion simulation, estimation and diagnostics.
"""


class JumpLanError(Exception):
    """Base class for all errors raised by the core package."""


class ModelValidationError(JumpLanError, ValueError):
    """Invalid model parameters, parameter spaces or model documents."""


class SimulationError(JumpLanError, RuntimeError):
    """
    Non-finite state while simulating a path.

    Carries the observation interval (1-based, as in Δ_j X) and the stream index
    of the failing replication.
    """

    def __init__(self, message, interval_index=None, stream_index=None):
        super().__init__(message)
        self.interval_index = interval_index
        self.stream_index = stream_index


class EvaluationError(JumpLanError, ArithmeticError):
    """Non-finite quasi-likelihood term; carries the 1-based interval index."""

    def __init__(self, message, interval_index=None):
        super().__init__(message)
        self.interval_index = interval_index


class UnsupportedModeError(JumpLanError, NotImplementedError):
    """Requested computation is not available for this model or configuration."""


class QuadratureError(JumpLanError, RuntimeError):
    """Quadrature did not reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class WaldTestError(JumpLanError, ValueError):
    """Information sub-block used by a Wald test is singular."""


class ConfigError(JumpLanError, ValueError):
    """Run configuration violates the schema; `field` is the dotted path."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
