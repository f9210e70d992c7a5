"""Kernel primitives: config validation, Gram structure, diffused modes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmeoc import (
    DIFFUSED_MODES,
    InputError,
    KernelConfig,
    build_grams,
    control_gram,
    cross_gram_diffused,
    cross_vector,
    diffused_rbf_eval,
    gram,
    rbf_eval,
)

finite_floats = st.floats(-5.0, 5.0, allow_nan=False, allow_infinity=False)


class TestKernelConfig:
    def test_defaults(self):
        cfg = KernelConfig(sigma=1.2)
        assert cfg.epsilon == 0.02
        assert cfg.dt == 1e-2
        assert cfg.gamma == 1e-8
        assert cfg.diffused_mode == "plus_2eps_dt"

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(sigma=0.0),
            dict(sigma=-1.0),
            dict(sigma=1.0, epsilon=-0.1),
            dict(sigma=1.0, dt=0.0),
            dict(sigma=1.0, gamma=-1e-8),
            dict(sigma=1.0, diffused_mode="bogus"),
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(InputError):
            KernelConfig(**kwargs)

    def test_denominator_bumps(self):
        c2 = KernelConfig(sigma=2.0, epsilon=0.1, dt=0.5)
        assert c2.diffused_denominator == pytest.approx(4.0 + 2 * 0.1 * 0.5)
        c4 = KernelConfig(
            sigma=2.0, epsilon=0.1, dt=0.5, diffused_mode="plus_4eps_dt"
        )
        assert c4.diffused_denominator == pytest.approx(4.0 + 4 * 0.1 * 0.5)
        assert set(DIFFUSED_MODES) == {"plus_2eps_dt", "plus_4eps_dt"}


class TestGram:
    def test_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(3, 20))
        K = gram(X, 1.5)
        assert np.all(np.diag(K) == 1.0)
        assert np.array_equal(K, K.T)

    def test_identical_columns_all_ones(self):
        X = np.array([[1.3, 1.3]])
        assert np.allclose(gram(X, 0.7), np.ones((2, 2)), atol=1e-15)

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(2, 30))
        eig = np.linalg.eigvalsh(gram(X, 1.0))
        assert eig.min() >= -1e-10

    @settings(deadline=None, max_examples=30)
    @given(
        arrays(np.float64, (2, 5), elements=finite_floats),
        st.floats(0.3, 3.0),
    )
    def test_gram_entries_match_rbf_eval(self, X, sigma):
        K = gram(X, sigma)
        for i in range(5):
            for j in range(5):
                expected = 1.0 if i == j else rbf_eval(X[:, i], X[:, j], sigma)
                assert K[i, j] == pytest.approx(expected, abs=1e-12)


class TestRbf:
    @settings(deadline=None, max_examples=50)
    @given(
        arrays(np.float64, (3,), elements=finite_floats),
        arrays(np.float64, (3,), elements=finite_floats),
        st.floats(0.2, 4.0),
    )
    def test_symmetric_and_bounded(self, x, y, sigma):
        v = rbf_eval(x, y, sigma)
        # Exactly 0.0 is reachable through exp underflow at large distances.
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(rbf_eval(y, x, sigma), abs=1e-15)

    def test_no_factor_two_in_denominator(self):
        # k(0, 1) at sigma = 1 is exp(-1), NOT exp(-1/2).
        assert rbf_eval(np.zeros(1), np.ones(1), 1.0) == pytest.approx(
            np.exp(-1.0), abs=1e-14
        )


class TestDiffused:
    def test_prefactor_scales_with_dimension(self):
        cfg = KernelConfig(sigma=1.0, epsilon=0.02, dt=0.01)
        one_d = diffused_rbf_eval(np.zeros(1), np.zeros(1), cfg, n_x=1)
        two_d = diffused_rbf_eval(np.zeros(2), np.zeros(2), cfg, n_x=2)
        assert two_d == pytest.approx(one_d**2, abs=1e-14)

    def test_bounded_by_prefactor(self):
        cfg = KernelConfig(sigma=1.0, epsilon=0.5, dt=0.1)
        pref = (1.0 / cfg.diffused_denominator) ** 0.5
        rng = np.random.default_rng(2)
        for _ in range(20):
            x, y = rng.normal(size=(2, 1))
            v = diffused_rbf_eval(np.atleast_1d(x), np.atleast_1d(y), cfg, 1)
            assert 0.0 < v <= pref + 1e-15


class TestCrossGram:
    def test_orientation_rows_inputs_cols_successors(self):
        cfg = KernelConfig(sigma=1.1, epsilon=0.02, dt=0.01)
        rng = np.random.default_rng(3)
        X = rng.normal(size=(2, 4))
        Y = rng.normal(size=(2, 6))
        K = cross_gram_diffused(X, Y, cfg)
        assert K.shape == (4, 6)
        for i in range(4):
            for j in range(6):
                assert K[i, j] == pytest.approx(
                    diffused_rbf_eval(X[:, i], Y[:, j], cfg, 2), abs=1e-13
                )

    def test_cross_vector_matches_rbf(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(3, 8))
        x = rng.normal(size=3)
        v = cross_vector(x, X, 0.9)
        assert v.shape == (8,)
        for i in range(8):
            assert v[i] == pytest.approx(rbf_eval(x, X[:, i], 0.9), abs=1e-13)


class TestControlGram:
    @settings(deadline=None, max_examples=30)
    @given(
        arrays(np.float64, (1, 6), elements=finite_floats),
        arrays(np.float64, (2, 6), elements=finite_floats),
    )
    def test_dual_form_agreement(self, X, U):
        K_X = gram(X, 1.0)
        K_U = control_gram(K_X, U)
        dual = K_X + sum(
            np.diag(U[m]) @ K_X @ np.diag(U[m]) for m in range(2)
        )
        assert np.max(np.abs(K_U - dual)) <= 1e-12

    def test_spd_with_ridge(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-3, 3, size=(1, 40))
        U = rng.uniform(-1, 1, size=(1, 40))
        K_U = control_gram(gram(X, 1.2), U)
        eig = np.linalg.eigvalsh(K_U + 1e-8 * np.eye(40))
        assert eig.min() > 0


class TestBuildGrams:
    def test_bundle_shapes_and_consistency(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(2, 12))
        U = rng.normal(size=(1, 12))
        Y = rng.normal(size=(2, 12))
        cfg = KernelConfig(sigma=1.0)
        bundle = build_grams(X, U, Y, cfg)
        assert bundle.N == 12
        assert bundle.K_X.shape == bundle.K_U.shape == (12, 12)
        assert bundle.eK_XY.shape == (12, 12)
        assert np.array_equal(bundle.K_U, control_gram(bundle.K_X, U))
        assert np.array_equal(bundle.eK_XY, cross_gram_diffused(X, Y, cfg))

    def test_sample_count_mismatch_rejected(self):
        cfg = KernelConfig(sigma=1.0)
        with pytest.raises(InputError):
            build_grams(
                np.zeros((1, 5)), np.zeros((1, 4)), np.zeros((1, 5)), cfg
            )
