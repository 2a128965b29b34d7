"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation (e.g. θ ≤ 0)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (singular matrix, non-finite values, divergence)."""


class RankDeficiencyError(NumericalError):
    """A Gram or mass matrix is singular to working precision."""
