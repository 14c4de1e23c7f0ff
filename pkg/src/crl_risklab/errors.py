"""Exception hierarchy shared by every module."""

from __future__ import annotations


class RiskLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(RiskLabError, ValueError):
    pass


class NotADistribution(RiskLabError, ValueError):
    pass


class SupportViolation(RiskLabError, ValueError):
    """Positive mass sits on an item with zero negative mass."""


class ZeroMarginal(RiskLabError, ValueError):
    pass


class MissingLabelSlice(RiskLabError, ValueError):
    pass


class DegenerateClassPrior(RiskLabError, ValueError):
    pass


class InfeasibleFloor(RiskLabError, ValueError):
    pass


class NonFiniteInput(RiskLabError, ValueError):
    pass


class SimplexTooLarge(RiskLabError, ValueError):
    pass


class ShapeMismatch(RiskLabError, ValueError):
    pass


class NonSmoothDisutility(RiskLabError, ValueError):
    """Gradient requested for a disutility without a derivative (CVaR)."""


class HeterogeneousNegatives(RiskLabError, ValueError):
    """Shared-negative sampling on a problem whose negative rows differ."""


class InsufficientTrials(RiskLabError, RuntimeError):
    pass


class TrainingDiverged(RiskLabError, RuntimeError):
    pass


# The trainer contract names this condition "Diverged".
Diverged = TrainingDiverged


class UsageError(RiskLabError):
    pass


class ContractViolation(RiskLabError):
    """A mathematical identity or inequality checked at runtime failed."""
