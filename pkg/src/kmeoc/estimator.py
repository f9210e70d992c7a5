"""Kernel ridge regression of the embedded transition operators.

Given snapshot data (X, U, Y), the uncontrolled and control-scaled
operators solve one shared linear system,

    (K_U + gamma I) A_hat   = eK_XY,
    (K_U + gamma I) B_hat_m = U_m * eK_XY,

where U_m scales row i of the cross Gram matrix by the m-th control
coordinate of sample i, and eK_XY is the diffused cross Gram matrix.
The SPD factor of (K_U + gamma I) is computed once and retained; every
later solve (fitting, validation scoring, policy interpolation) reuses
it or the analogous state-only factor of (K_X + gamma I).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh

from .errors import (
    EstimationError,
    InputError,
    ScoringError,
    SelectionError,
)
from .kernel import KernelConfig, build_grams, cross_gram_diffused, gram
from .systems import Dataset

__all__ = [
    "EstimatedOperators",
    "ModelScore",
    "fit_krr",
    "enforce_markov",
    "departure_from_normality",
    "validation_score",
    "model_select",
]

log = logging.getLogger(__name__)

_JITTER_CAP = 1e-4


@dataclass
class EstimatedOperators:
    """Fitted operators plus everything needed to reuse their solves.

    Attributes
    ----------
    A_hat : ndarray, shape (N, N)
    B_hat_blocks : list of ndarray, each (N, N)
        One block per control coordinate.
    gram_factor : tuple or None
        Cholesky factor of (K_U + jitter I) as returned by
        ``scipy.linalg.cho_factor``; reusable via ``cho_solve``.  None
        on models restored from disk (the factor is not persisted).
    dataset_ref : Dataset
        The training data the fit was computed from.
    kernel_cfg : KernelConfig
    jitter : float
        The ridge actually used (equals ``kernel_cfg.gamma`` unless the
        factorization had to escalate).
    """

    A_hat: np.ndarray
    B_hat_blocks: List[np.ndarray]
    gram_factor: Optional[tuple]
    dataset_ref: Dataset
    kernel_cfg: KernelConfig
    jitter: float
    _x_gram: Optional[np.ndarray] = field(
        default=None, repr=False, compare=False
    )
    _x_factor: Optional[tuple] = field(
        default=None, repr=False, compare=False
    )

    @property
    def N(self) -> int:
        return self.A_hat.shape[0]

    @property
    def n_u(self) -> int:
        return len(self.B_hat_blocks)

    def gram_matvec(self, v: np.ndarray) -> np.ndarray:
        """Apply (K_U + jitter I) to v through the retained factor."""
        if self.gram_factor is None:
            raise InputError(
                "the Gram factor is not persisted; refit to obtain one"
            )
        c, lower = self.gram_factor
        tri = np.tril(c) if lower else np.triu(c)
        return tri @ (tri.T @ v) if lower else tri.T @ (tri @ v)

    def x_gram(self) -> np.ndarray:
        """State-only Gram matrix K_X, computed once on first use."""
        if self._x_gram is None:
            self._x_gram = gram(self.dataset_ref.X, self.kernel_cfg.sigma)
        return self._x_gram

    def x_gram_factor(self) -> tuple:
        """Cholesky factor of (K_X + gamma I), cached."""
        if self._x_factor is None:
            K = self.x_gram()
            reg = K + self.kernel_cfg.gamma * np.eye(K.shape[0])
            self._x_factor = cho_factor(reg)
        return self._x_factor

    def closed_loop(self, u: np.ndarray) -> np.ndarray:
        """A_hat + sum_m B_hat_m diag(u_m) for a control table u (n_u, N)."""
        u = np.asarray(u, dtype=float).reshape(self.n_u, self.N)
        M = self.A_hat.copy()
        for m, Bm in enumerate(self.B_hat_blocks):
            M += Bm * u[m][None, :]
        return M


@dataclass(frozen=True)
class ModelScore:
    """Per-sigma scores from model selection."""

    sigma: float
    validation_error: float
    departure_from_normality: float
    combined: float


def fit_krr(
    dataset: Dataset,
    cfg: KernelConfig,
    b_block_orientation: str = "row",
) -> EstimatedOperators:
    """Fit the transition operators by kernel ridge regression.

    Parameters
    ----------
    dataset : Dataset
    cfg : KernelConfig
    b_block_orientation : {"row", "column"}
        How the control coordinate scales the cross Gram matrix on the
        right-hand side of the B-blocks: "row" (default) scales sample
        rows, matching the algebra that makes the closed-loop operator
        consistent with the control Gram matrix; "column" is kept for
        comparison.

    Raises
    ------
    EstimationError
        If (K_U + gamma I) cannot be factorized even after escalating
        the ridge to 1e-4; the message reports the smallest pivot.
    """
    if dataset.N < 2:
        raise InputError(f"need at least 2 samples, got {dataset.N}")
    if b_block_orientation not in ("row", "column"):
        raise InputError(
            f"b_block_orientation must be 'row' or 'column', "
            f"got {b_block_orientation!r}"
        )
    bundle = build_grams(dataset.X, dataset.U, dataset.Y, cfg)
    N = bundle.N
    eye = np.eye(N)

    jitter = cfg.gamma
    factor = None
    while True:
        try:
            factor = cho_factor(bundle.K_U + jitter * eye)
            break
        except LinAlgError:
            # A literal zero ridge means the caller disabled regularization
            # on purpose; fail with advice instead of silently adding one.
            nxt = jitter * 10.0 if jitter > 0.0 else _JITTER_CAP * 10.0
            if nxt > _JITTER_CAP:
                smallest = float(eigvalsh(bundle.K_U)[0] + jitter)
                raise EstimationError(
                    f"(K_U + gamma I) is not SPD at jitter {jitter:.1e} "
                    f"(smallest pivot {smallest:.3e}); increase gamma",
                    smallest_pivot=smallest,
                ) from None
            warnings.warn(
                f"Gram factorization failed at jitter {jitter:.1e}; "
                f"escalating to {nxt:.1e}",
                stacklevel=2,
            )
            jitter = nxt

    A_hat = cho_solve(factor, bundle.eK_XY)
    B_hat_blocks = []
    for m in range(dataset.n_u):
        u_m = dataset.U[m]
        if b_block_orientation == "row":
            rhs = u_m[:, None] * bundle.eK_XY
        else:
            rhs = bundle.eK_XY * u_m[None, :]
        B_hat_blocks.append(cho_solve(factor, rhs))

    return EstimatedOperators(
        A_hat=A_hat,
        B_hat_blocks=B_hat_blocks,
        gram_factor=factor,
        dataset_ref=dataset,
        kernel_cfg=cfg,
        jitter=jitter,
    )


def enforce_markov(ops: EstimatedOperators) -> EstimatedOperators:
    """Project the operators onto the Markov constraint set.

    Every column of A_hat is shifted uniformly so it sums to 1, and
    every column of each B-block so it sums to 0.  The input operators
    are left untouched; the returned copies share the training data and
    retained factorizations.
    """
    N = ops.N
    A = ops.A_hat + (1.0 - ops.A_hat.sum(axis=0))[None, :] / N
    blocks = [Bm - Bm.sum(axis=0)[None, :] / N for Bm in ops.B_hat_blocks]
    return replace(ops, A_hat=A, B_hat_blocks=blocks)


def departure_from_normality(A_hat: np.ndarray) -> float:
    """Henrici's normalized departure from normality.

    sqrt(max(0, ||A||_F^2 - sum_i |lambda_i|^2)) / ||A||_F, with the
    convention that the zero matrix departs by 0.
    """
    A = np.asarray(A_hat, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"expected a square matrix, got shape {A.shape}")
    fro = float(np.linalg.norm(A, "fro"))
    if fro == 0.0:
        return 0.0
    try:
        eig = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise ScoringError(f"eigenvalue iteration failed: {exc}") from exc
    gap = max(0.0, fro**2 - float(np.sum(np.abs(eig) ** 2)))
    return float(np.sqrt(gap)) / fro


def validation_score(ops: EstimatedOperators, holdout: Dataset) -> float:
    """Held-out one-step embedding residual, lower is better.

    For each holdout transition ((x, u), y) the fitted closed-loop
    operator is applied to the interpolation weights of x,

        c_pred = (A_hat + sum_m B_hat_m u_m) w(x),
        (K_X + gamma I) w(x) = k_X(x),

    and the predicted kernel section K_X c_pred is compared against the
    regression target eK(X, y) on the training points.  Returns the
    mean squared discrepancy over all (training point, holdout sample)
    pairs.
    """
    if holdout.N == 0:
        raise InputError("holdout dataset is empty")
    if holdout.n_x != ops.dataset_ref.n_x or holdout.n_u != ops.dataset_ref.n_u:
        raise InputError("holdout dimensions do not match the training data")
    cfg = ops.kernel_cfg
    X = ops.dataset_ref.X
    # k(x_i_train, x_j_holdout): a zero-diffusion cross Gram matrix.
    zero_diff = replace(cfg, epsilon=0.0)
    K_xq = cross_gram_diffused(X, holdout.X, zero_diff)
    W = cho_solve(ops.x_gram_factor(), K_xq)  # (N, M)
    C = ops.A_hat @ W
    for m, Bm in enumerate(ops.B_hat_blocks):
        C += Bm @ (W * holdout.U[m][None, :])
    predicted = ops.x_gram() @ C
    target = cross_gram_diffused(X, holdout.Y, cfg)
    return float(np.mean((predicted - target) ** 2))


def _split_indices(N: int, val_fraction: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1EC7]))
    perm = rng.permutation(N)
    n_val = min(N - 2, max(1, int(round(val_fraction * N))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _subset(ds: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(
        X=ds.X[:, idx],
        U=ds.U[:, idx],
        Y=ds.Y[:, idx],
        cost=ds.cost[idx],
        dt=ds.dt,
        epsilon=ds.epsilon,
        seed=ds.seed,
        system=ds.system,
    )


def _minmax(vals: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(vals)), float(np.max(vals))
    if hi - lo <= 0.0:
        return np.zeros_like(vals)
    return (vals - lo) / (hi - lo)


def model_select(
    dataset: Dataset,
    sigma_grid: Sequence[float],
    weights: Tuple[float, float] = (1.0, 0.1),
    val_fraction: float = 0.2,
    gamma: float = 1e-8,
    diffused_mode: str = "plus_2eps_dt",
) -> Tuple[float, List[ModelScore]]:
    """Pick the kernel scale minimizing a weighted two-part score.

    The dataset is split deterministically (by its own seed) into a
    training part and a ``val_fraction`` holdout.  For every sigma in
    the grid the operators are fitted on the training part and scored
    by the held-out embedding residual and by the departure from
    normality of A_hat.  Both score vectors are min-max normalized
    across the grid, combined with the given weights, and the argmin is
    returned; ties break toward the smaller sigma.

    Returns
    -------
    (best_sigma, scores)
        ``scores`` has one entry per grid point that fitted
        successfully, in ascending sigma order.

    Raises
    ------
    SelectionError
        If every fit fails.
    """
    if len(sigma_grid) == 0:
        raise InputError("sigma grid is empty")
    sigmas = sorted(float(s) for s in sigma_grid)
    train_idx, val_idx = _split_indices(dataset.N, val_fraction, dataset.seed)
    train, val = _subset(dataset, train_idx), _subset(dataset, val_idx)

    def _one(sig: float):
        cfg = KernelConfig(
            sigma=sig,
            epsilon=dataset.epsilon,
            dt=dataset.dt,
            gamma=gamma,
            diffused_mode=diffused_mode,
        )
        ops = fit_krr(train, cfg)
        return (
            sig,
            validation_score(ops, val),
            departure_from_normality(ops.A_hat),
        )

    results = []
    with ThreadPoolExecutor(max_workers=min(4, len(sigmas))) as pool:
        futures = {pool.submit(_one, s): s for s in sigmas}
        for fut in futures:
            try:
                results.append(fut.result())
            except (EstimationError, LinAlgError) as exc:
                log.warning("fit failed for sigma=%g: %s", futures[fut], exc)

    if not results:
        raise SelectionError("all candidate fits failed across the sigma grid")
    results.sort(key=lambda t: t[0])
    val_norm = _minmax(np.array([r[1] for r in results]))
    dep_norm = _minmax(np.array([r[2] for r in results]))
    w1, w2 = weights
    combined = w1 * val_norm + w2 * dep_norm

    scores = [
        ModelScore(
            sigma=r[0],
            validation_error=r[1],
            departure_from_normality=r[2],
            combined=float(c),
        )
        for r, c in zip(results, combined)
    ]
    best_i = 0
    for i in range(1, len(scores)):
        if scores[i].combined < scores[best_i].combined:
            best_i = i
    return scores[best_i].sigma, scores
