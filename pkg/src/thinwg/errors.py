"""Exception types shared across the package.

Solver errors carry enough state (residuals, iteration counts) for callers
to decide between retrying with different parameters and giving up; the CLI
maps them onto process exit codes.
"""
from __future__ import annotations


class ThinwgError(Exception):
    """Base class for all package-specific errors."""


class StructuralError(ThinwgError, ValueError):
    """Malformed discrete structure (bad triplets, index out of range, ...)."""


class ContractError(ThinwgError, ValueError):
    """Input violates a documented precondition of an operation."""


class SizeError(ThinwgError, ValueError):
    """Problem size outside the supported range for the requested operation."""


class ResolutionError(ThinwgError, ValueError):
    """Grid or mesh too coarse to honour the requested discretisation."""


class BudgetError(ThinwgError, RuntimeError):
    """A work estimate (cell count, evaluation count) exceeds the hard cap."""


class InfeasibleRegimeError(ThinwgError, ValueError):
    """Requested parameters leave the feasible regime (e.g. d <= eps fails)."""


class BracketExhaustionError(ThinwgError, RuntimeError):
    """Root scan ran out of budget before locating the requested count."""


class IterationLimitError(ThinwgError, RuntimeError):
    """Iterative solve hit its iteration cap; carries the final residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class NonConvergenceError(ThinwgError, RuntimeError):
    """Eigen-iteration did not meet tolerance; carries per-pair residuals."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ConfigError(ThinwgError, ValueError):
    """Invalid run configuration; message names the offending key."""
