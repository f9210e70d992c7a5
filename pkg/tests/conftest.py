"""Shared fixtures: small fitted models reused across test modules."""

import numpy as np
import pytest

from kmeoc import (
    Box,
    ControlAffineSystem,
    ControlPenalty,
    Dataset,
    KernelConfig,
    fit_krr,
)
from kmeoc.bench import bench_config, fit_and_solve
from kmeoc.systems import make_system


def make_static_dataset(N=60, n_x=1, n_u=1, seed=0):
    """Zero-dynamics snapshots: Y = X exactly, random states and controls."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n_x, N))
    U = rng.uniform(-1.0, 1.0, size=(n_u, N))
    cost = np.sum(X**2, axis=0) * 1e-2
    return Dataset(
        X=X, U=U, Y=X.copy(), cost=cost, dt=1e-2, epsilon=0.0, seed=seed,
        system="static",
    )


def make_static_system():
    """A do-nothing system for rollout and integration edge cases."""
    return ControlAffineSystem(
        name="static",
        n_x=1,
        n_u=1,
        drift=lambda x: np.zeros(1),
        input_map=lambda x: np.zeros((1, 1)),
        state_cost=lambda x: float(x[0] ** 2),
        penalty=ControlPenalty(weights=np.array([1.0])),
        domain=Box(np.array([-2.0]), np.array([2.0])),
        control_box=Box(np.array([-1.0]), np.array([1.0])),
    )


@pytest.fixture(scope="session")
def static_ops():
    """Operators fitted on exact identity transitions (epsilon = 0)."""
    ds = make_static_dataset()
    cfg = KernelConfig(sigma=1.0, epsilon=0.0, dt=1e-2, gamma=1e-8)
    return fit_krr(ds, cfg)


@pytest.fixture(scope="session")
def s1_fit():
    """A small S1 pipeline run shared by hjb/fpk/bench tests: (ops, sol)."""
    cfg = bench_config("s1", {"N": 400, "H": 300})
    return fit_and_solve(make_system("s1"), cfg, data_seed=123)


@pytest.fixture(scope="session")
def s1_sol_full_horizon():
    """S1 solution at the full default horizon with the stopping rule
    disabled, so every value/policy row is actually computed."""
    cfg = bench_config("s1", {"N": 300, "H": 500, "stop_tol": 0.0})
    return fit_and_solve(make_system("s1"), cfg, data_seed=7)


@pytest.fixture()
def tmp_out(tmp_path):
    return str(tmp_path)


__all__ = ["make_static_dataset", "make_static_system"]
