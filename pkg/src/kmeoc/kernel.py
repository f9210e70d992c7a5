"""Gaussian RBF kernels and Gram-matrix construction.

All state containers in this package use the column convention: an
``n_x x N`` array holds ``N`` states of dimension ``n_x``, one per
column.  The kernel is

    k(x, y) = exp(-||x - y||^2 / sigma^2),

note the plain ``sigma**2`` denominator (no factor of 2).  The diffused
variant ``diffused_rbf_eval`` additionally smooths one argument by the
Gaussian increment of an Euler-Maruyama step, which shows up as an
enlarged denominator and a normalizing prefactor; two conventions for
the enlargement are supported, see :class:`KernelConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InputError

__all__ = [
    "DIFFUSED_MODES",
    "KernelConfig",
    "GramBundle",
    "rbf_eval",
    "diffused_rbf_eval",
    "gram",
    "control_gram",
    "cross_gram_diffused",
    "cross_vector",
    "build_grams",
]

#: Supported smoothing conventions for the diffused kernel.  The name
#: records the term added to sigma^2 in the exponent denominator:
#:
#: ``plus_2eps_dt``
#:     denominator sigma^2 + 2*eps*dt (default closed form).
#: ``plus_4eps_dt``
#:     denominator sigma^2 + 4*eps*dt; this is the exact Gaussian
#:     expectation E_w[k(x, y + sqrt(2*eps*dt)*w)], w ~ N(0, I).
DIFFUSED_MODES = ("plus_2eps_dt", "plus_4eps_dt")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel and regression hyperparameters.

    Parameters
    ----------
    sigma : float
        RBF length scale, > 0.
    epsilon : float
        Diffusion parameter, >= 0.  Enters only the diffused kernel.
    dt : float
        Sampling time of the snapshot data, > 0.
    gamma : float
        Tikhonov regularization, >= 0.
    diffused_mode : str
        One of :data:`DIFFUSED_MODES`.
    """

    sigma: float
    epsilon: float = 0.02
    dt: float = 1e-2
    gamma: float = 1e-8
    diffused_mode: str = "plus_2eps_dt"

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError(f"sigma must be > 0, got {self.sigma}")
        if not self.dt > 0:
            raise InputError(f"dt must be > 0, got {self.dt}")
        if self.epsilon < 0:
            raise InputError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.gamma < 0:
            raise InputError(f"gamma must be >= 0, got {self.gamma}")
        if self.diffused_mode not in DIFFUSED_MODES:
            raise InputError(
                f"diffused_mode must be one of {DIFFUSED_MODES}, "
                f"got {self.diffused_mode!r}"
            )

    @property
    def diffused_denominator(self) -> float:
        """sigma^2 plus the mode-dependent smoothing term."""
        bump = 2.0 if self.diffused_mode == "plus_2eps_dt" else 4.0
        return self.sigma**2 + bump * self.epsilon * self.dt


@dataclass(frozen=True)
class GramBundle:
    """The three Gram matrices a fit needs, built in one pass."""

    K_X: np.ndarray
    K_U: np.ndarray
    eK_XY: np.ndarray
    N: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "N", self.K_X.shape[0])


def _as_states(X, name: str) -> np.ndarray:
    """Coerce to a 2-D float array of column states."""
    A = np.asarray(X, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.size == 0:
        raise InputError(f"{name} must be a non-empty n_x x N array")
    return A


def rbf_eval(x, y, sigma: float) -> float:
    """Evaluate exp(-||x-y||^2 / sigma^2) for a single pair of states."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not sigma > 0:
        raise InputError(f"sigma must be > 0, got {sigma}")
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / sigma**2))


def diffused_rbf_eval(x, y, cfg: KernelConfig, n_x: int) -> float:
    """Evaluate the diffused kernel for a single pair of states.

    The value is ``(sigma^2/den)^(n_x/2) * exp(-||x-y||^2/den)`` with
    ``den`` given by ``cfg.diffused_denominator``.  At ``epsilon == 0``
    this is bit-for-bit equal to :func:`rbf_eval` in both modes.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if x.shape[0] != n_x:
        raise InputError(f"state dimension {x.shape[0]} != n_x = {n_x}")
    den = cfg.diffused_denominator
    pref = (cfg.sigma**2 / den) ** (n_x / 2.0)
    d2 = float(np.sum((x - y) ** 2))
    return float(pref * np.exp(-d2 / den))


def gram(X, sigma: float) -> np.ndarray:
    """Pairwise RBF Gram matrix of the columns of ``X``.

    Symmetric by construction (distances are computed once and the
    exponential preserves the symmetry of ``cdist``'s output); the
    diagonal is exactly 1.
    """
    X = _as_states(X, "X")
    if not sigma > 0:
        raise InputError(f"sigma must be > 0, got {sigma}")
    D2 = cdist(X.T, X.T, metric="sqeuclidean")
    K = np.exp(-D2 / sigma**2)
    np.fill_diagonal(K, 1.0)
    return K


def control_gram(K_X: np.ndarray, U) -> np.ndarray:
    """Control-tensorized Gram matrix K_X * (1 + U^T U), entrywise.

    Equivalent to ``K_X + sum_m diag(U_m) K_X diag(U_m)``; both forms
    are useful, the Hadamard one is what gets computed.
    """
    U = _as_states(U, "U")
    if K_X.shape[0] != K_X.shape[1] or K_X.shape[1] != U.shape[1]:
        raise InputError(
            f"shape mismatch: K_X {K_X.shape} vs U with {U.shape[1]} columns"
        )
    return K_X * (1.0 + U.T @ U)


def cross_gram_diffused(X, Y, cfg: KernelConfig) -> np.ndarray:
    """Cross-covariance matrix of the diffused kernel.

    Entry (i, j) is the diffused kernel between training input x^(i)
    (row index) and successor state y^(j) (column index).
    """
    X = _as_states(X, "X")
    Y = _as_states(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"shape mismatch: X {X.shape} vs Y {Y.shape}")
    den = cfg.diffused_denominator
    pref = (cfg.sigma**2 / den) ** (X.shape[0] / 2.0)
    D2 = cdist(X.T, Y.T, metric="sqeuclidean")
    return pref * np.exp(-D2 / den)


def cross_vector(x, X, sigma: float) -> np.ndarray:
    """Row of plain-kernel values of one query state against training columns."""
    X = _as_states(X, "X")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != X.shape[0]:
        raise InputError(f"query dimension {x.shape[0]} != n_x = {X.shape[0]}")
    d2 = np.sum((X - x[:, None]) ** 2, axis=0)
    return np.exp(-d2 / sigma**2)


def build_grams(X, U, Y, cfg: KernelConfig) -> GramBundle:
    """Build K_X, K_U and the diffused cross-covariance in one call."""
    X = _as_states(X, "X")
    U = _as_states(U, "U")
    Y = _as_states(Y, "Y")
    if not (X.shape[1] == U.shape[1] == Y.shape[1]):
        raise InputError("X, U, Y must have the same number of columns")
    K_X = gram(X, cfg.sigma)
    K_U = control_gram(K_X, U)
    eK_XY = cross_gram_diffused(X, Y, cfg)
    return GramBundle(K_X=K_X, K_U=K_U, eK_XY=eK_XY)
