"""Exception hierarchy.

Every error raised by this package derives from :class:`KmeocError`, so
callers (including the CLI) can distinguish library failures from plain
bugs.  Errors that point at a specific step of an iterative computation
carry that step as an attribute.
"""

from __future__ import annotations

__all__ = [
    "KmeocError",
    "ConfigError",
    "InputError",
    "IntegrationError",
    "EstimationError",
    "ScoringError",
    "SelectionError",
    "DivergenceError",
    "PropagationError",
    "RolloutError",
    "OracleError",
    "StorageError",
    "HeaderError",
    "VersionError",
    "ChecksumError",
    "InvariantError",
]


class KmeocError(Exception):
    """Base class for all library errors."""


class ConfigError(KmeocError):
    """Invalid or unknown configuration key/value."""


class InputError(KmeocError, ValueError):
    """An argument fails validation (shape, emptiness, range)."""


class IntegrationError(KmeocError):
    """SDE/ODE integration produced a non-finite state.

    Attributes
    ----------
    step : int
        Index of the substep at which the state became non-finite.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class EstimationError(KmeocError):
    """Gram factorization failed even after jitter escalation.

    Attributes
    ----------
    smallest_pivot : float
        Smallest pivot (eigenvalue estimate) of the matrix that refused
        a Cholesky factorization; advisory for choosing a larger gamma.
    """

    def __init__(self, message: str, smallest_pivot: float = float("nan")):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class ScoringError(KmeocError):
    """Model scoring failed (e.g. eigenvalue iteration did not converge)."""


class SelectionError(KmeocError):
    """Every candidate fit in a model-selection sweep failed."""


class DivergenceError(KmeocError):
    """The backward value recursion produced a non-finite iterate.

    This usually signals an unstable learned operator spectrum; enforcing
    the Markov constraints or choosing a different kernel scale tends to
    help.  ``step`` is the backward time index k at which the blow-up was
    detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class PropagationError(KmeocError):
    """Forward measure propagation produced a non-finite weight vector."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class RolloutError(KmeocError):
    """A closed-loop simulation escaped the instability guard region."""


class OracleError(KmeocError):
    """A reference computation has no valid solution (e.g. no stabilizing
    Riccati root)."""


class StorageError(KmeocError):
    """Base class for persistence failures."""


class HeaderError(StorageError):
    """File is not an artifact (bad magic, truncated header)."""


class VersionError(StorageError):
    """Artifact version is not supported by this build."""


class ChecksumError(StorageError):
    """Artifact payload bytes do not match their recorded checksum."""


class InvariantError(StorageError):
    """A loaded artifact violates an invariant of its payload type.

    Attributes
    ----------
    invariant : str
        Human-readable name of the violated invariant.
    """

    def __init__(self, message: str, invariant: str):
        super().__init__(message)
        self.invariant = invariant
