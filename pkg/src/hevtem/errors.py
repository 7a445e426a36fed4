"""Exception types shared across the toolkit.

Every error carries a human-readable message; errors that originate from a
quantified violation also carry the offending quantity so callers (and the
optimizer's penalty machinery) can react without string parsing.
"""

from __future__ import annotations


class HevtemError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HevtemError):
    """Malformed or inconsistent configuration input."""


class InvalidConfig(ConfigError):
    """Semantically invalid generator/scenario configuration."""


class ConstraintViolation(HevtemError):
    """A hard operating limit was exceeded (reported, never clamped)."""

    def __init__(self, message: str, quantity: str = "", value: float = 0.0,
                 limit: float = 0.0):
        super().__init__(message)
        self.quantity = quantity
        self.value = value
        self.limit = limit


class OutOfEnvelope(ConstraintViolation):
    """Operating point outside a model map's torque/speed envelope."""


class PowerInfeasible(HevtemError):
    """Battery pack cannot deliver the requested electrical power."""

    def __init__(self, message: str, requested_w: float = 0.0,
                 max_feasible_w: float = 0.0):
        super().__init__(message)
        self.requested_w = requested_w
        self.max_feasible_w = max_feasible_w


class EmptyInput(HevtemError):
    """An operation received no data to work on."""


class StallError(HevtemError):
    """Speed-field walk cannot advance (local mean speed at or below floor)."""


class OutOfGrid(HevtemError):
    """Speed-field walk left the grid before its stop condition."""


class BadWindow(HevtemError):
    """Feature window has the wrong length or invalid samples."""


class DegenerateInput(HevtemError):
    """Input matrix too small or rank-deficient for the requested fit."""


class SingularCovariance(HevtemError):
    """Mixture covariance not positive definite even after regularization."""


class LengthMismatch(HevtemError):
    """Paired sequences have different lengths."""


class ShapeError(HevtemError):
    """Array shapes inconsistent with the model configuration."""


class NonFiniteLoss(HevtemError):
    """Training loss became NaN/inf."""

    def __init__(self, message: str, epoch: int = -1):
        super().__init__(message)
        self.epoch = epoch


class ProfileTooShort(HevtemError):
    """Speed profile shorter than the requested optimization horizon."""


class PlannerFailed(HevtemError):
    """Global planner could not produce usable references.

    Carries whatever best-effort references and diagnostics were computed
    before the failure, so callers can degrade gracefully.
    """

    def __init__(self, message: str, references=None, diagnostics=None):
        super().__init__(message)
        self.references = references
        self.diagnostics = diagnostics


class SimulationError(HevtemError):
    """A scenario run aborted; carries the failing step index and cause."""

    def __init__(self, message: str, step: int = -1,
                 cause: Exception | None = None):
        super().__init__(message)
        self.step = step
        self.cause = cause


class MismatchedCycles(HevtemError):
    """Strategy comparison requested over non-identical driving cycles."""
