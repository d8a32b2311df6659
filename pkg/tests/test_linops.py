import numpy as np
import pytest

import mbirnet as mn
from mbirnet.linops import ShapeError


def dense(mat):
    return mn.DenseMatrixOperator(np.asarray(mat, dtype=float))


class TestImageVector:
    def test_round_trip(self):
        img = mn.ImageVector(np.arange(6.0), (2, 3))
        assert img.as_2d().shape == (2, 3)
        assert np.array_equal(mn.ImageVector.from_2d(img.as_2d()).data, img.data)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mn.ImageVector(np.arange(5.0), (2, 3))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            mn.ImageVector(np.array([1.0, np.inf]), (1, 2))


class TestApplyForward:
    def test_identity(self):
        op = mn.IdentityOperator(3)
        assert np.array_equal(mn.apply_forward(op, np.array([1.0, 2.0, 3.0])),
                              [1.0, 2.0, 3.0])

    def test_hand_matrix(self):
        out = mn.apply_forward(dense([[1, 2], [3, 4]]), np.array([1.0, 1.0]))
        assert np.array_equal(out, [3.0, 7.0])

    def test_zero_operator(self):
        out = mn.apply_forward(dense(np.zeros((3, 2))), np.array([5.0, -2.0]))
        assert np.array_equal(out, np.zeros(3))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            mn.apply_forward(dense([[1, 2], [3, 4]]), np.ones(3))


def _adjoint_gap(op, rng, trials=1000):
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.in_dim)
        v = rng.standard_normal(op.out_dim)
        lhs = float(np.dot(op.forward(u), v))
        rhs = float(np.dot(u, op.adjoint(v)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    return worst


class TestAdjointConsistency:
    def test_dense(self, rng):
        assert _adjoint_gap(dense(rng.standard_normal((7, 5))), rng) < 1e-10

    def test_sparse(self, rng):
        import scipy.sparse as sp
        mat = sp.random(20, 12, density=0.3, random_state=3, format="csr")
        assert _adjoint_gap(mn.SparseMatrixOperator(mat), rng) < 1e-10

    def test_identity(self, rng):
        assert _adjoint_gap(mn.IdentityOperator(9), rng) < 1e-10

    def test_circular_conv(self, rng):
        op = mn.CircularConvOperator(rng.standard_normal((3, 3)), (8, 8))
        assert _adjoint_gap(op, rng) < 1e-10

    def test_circulant_matches_sparse_materialization(self, rng):
        op = mn.CircularConvOperator(rng.standard_normal((3, 3)), (6, 6))
        dense_mat = op.to_sparse().toarray()
        x = rng.standard_normal(36)
        assert np.allclose(op.forward(x), dense_mat @ x, atol=1e-12)


class TestDatafitGradient:
    def test_zero_residual(self):
        op = dense([[1, 2], [3, 4]])
        x = np.array([1.0, 1.0])
        f = mn.QuadraticDataFit(op, np.ones(2), op.forward(x))
        assert np.allclose(mn.datafit_gradient(f, x), 0.0, atol=1e-14)

    def test_identity_quadratic(self):
        f = mn.QuadraticDataFit(mn.IdentityOperator(2), np.ones(2), np.zeros(2))
        assert np.array_equal(mn.datafit_gradient(f, np.array([2.0, -1.0])), [2.0, -1.0])

    def test_hand_arithmetic(self):
        f = mn.QuadraticDataFit(dense([[1, 2], [3, 4]]), np.array([1.0, 2.0]), np.zeros(2))
        assert np.array_equal(mn.datafit_gradient(f, np.array([1.0, 1.0])), [45.0, 62.0])

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            mn.QuadraticDataFit(mn.IdentityOperator(2), np.array([1.0, -1.0]), np.zeros(2))


class TestDiagMajorizer:
    def test_hand_value_and_psd(self):
        op = dense([[1, 2], [3, 4]])
        f = mn.QuadraticDataFit(op, np.ones(2), np.zeros(2))
        m = mn.diag_majorizer(f)
        assert np.allclose(m.diag, [24.0, 34.0])
        gap = np.diag(m.diag) - op.matrix.T @ op.matrix
        eigs = np.linalg.eigvalsh(gap)
        assert eigs.min() >= -1e-10 * np.max(m.diag)
        assert np.allclose(sorted(eigs), [0.0, 28.0], atol=1e-12)

    def test_identity(self):
        f = mn.QuadraticDataFit(mn.IdentityOperator(4), np.ones(4), np.zeros(4))
        assert np.allclose(mn.diag_majorizer(f).diag, 1.0)

    def test_zero_column_floored(self):
        op = dense([[1.0, 0.0], [2.0, 0.0]])
        f = mn.QuadraticDataFit(op, np.ones(2), np.zeros(2))
        m = mn.diag_majorizer(f)
        assert m.diag[1] == pytest.approx(1e-8 * m.diag.max())
        assert m.diag[1] > 0

    def test_psd_on_random_dense(self, rng):
        for _ in range(20):
            mat = np.abs(rng.standard_normal((12, 8)))
            w = rng.uniform(0.0, 2.0, 12)
            f = mn.QuadraticDataFit(dense(mat), w, np.zeros(12))
            m = mn.diag_majorizer(f)
            gap = np.diag(m.diag) - mat.T @ (w[:, None] * mat)
            assert np.linalg.eigvalsh(gap).min() >= -1e-10 * np.max(m.diag)


class TestMbirGradient:
    def _objective(self, op, w, y, gamma, z, feasible=None):
        f = mn.QuadraticDataFit(op, w, y)
        return mn.MbirObjective(f, gamma, z, feasible or mn.FeasibleSet.all())

    def test_both_terms_vanish(self):
        op = dense([[1, 2], [3, 4]])
        x = np.array([1.0, 1.0])
        obj = self._objective(op, np.ones(2), op.forward(x), 1.0, x)
        assert np.allclose(mn.mbir_gradient(obj, x), 0.0, atol=1e-14)

    def test_pure_proximity(self):
        obj = self._objective(dense(np.zeros((2, 2))), np.ones(2), np.zeros(2),
                              2.0, np.zeros(2))
        assert np.array_equal(mn.mbir_gradient(obj, np.array([1.0, 1.0])), [2.0, 2.0])

    def test_composite_hand_value(self):
        obj = self._objective(dense([[1, 2], [3, 4]]), np.array([1.0, 2.0]),
                              np.zeros(2), 1.0, np.zeros(2))
        assert np.array_equal(mn.mbir_gradient(obj, np.array([1.0, 1.0])), [46.0, 63.0])

    def test_matches_finite_differences(self, rng):
        op = dense(rng.standard_normal((6, 4)))
        obj = self._objective(op, rng.uniform(0.1, 2.0, 6), rng.standard_normal(6),
                              0.7, rng.standard_normal(4))
        for _ in range(5):
            x = rng.standard_normal(4)
            g = mn.mbir_gradient(obj, x)
            scale = max(1.0, float(np.abs(x).max()))
            h = 1e-5 * scale
            fd = np.zeros(4)
            for j in range(4):
                e = np.zeros(4)
                e[j] = h
                fd[j] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
            assert np.linalg.norm(fd - g) <= 1e-6 * max(1.0, np.linalg.norm(g))


class TestVerifyMajorization:
    def test_valid_majorizer_never_violates(self, rng):
        op = dense(np.abs(rng.standard_normal((6, 4))))
        f = mn.QuadraticDataFit(op, rng.uniform(0, 2, 6), rng.standard_normal(6))
        report = mn.verify_majorization(f, mn.diag_majorizer(f), trials=200, seed=0)
        assert report.ok
        assert report.max_violation <= 1e-10

    def test_scaled_down_majorizer_fails(self):
        op = dense([[1.0, 2.0], [3.0, 4.0]])
        f = mn.QuadraticDataFit(op, np.ones(2), np.zeros(2))
        weak = mn.DiagonalMajorizer(0.01 * mn.diag_majorizer(f).diag)
        report = mn.verify_majorization(f, weak, trials=100, seed=0)
        assert report.violations > 0

    def test_equal_points_hold_with_equality(self):
        f = mn.QuadraticDataFit(mn.IdentityOperator(3), np.ones(3), np.zeros(3))
        m = mn.diag_majorizer(f)
        v = np.array([1.0, -2.0, 0.5])
        lhs = f.value(v)
        rhs = f.value(v) + 0.5 * float(np.dot(m.scaled_diag * 0.0, np.zeros(3)))
        assert lhs == rhs

    def test_trials_validation(self):
        f = mn.QuadraticDataFit(mn.IdentityOperator(2), np.ones(2), np.zeros(2))
        with pytest.raises(ValueError):
            mn.verify_majorization(f, mn.diag_majorizer(f), trials=0, seed=0)


class TestSpectralSpread:
    def test_diagonal_values(self):
        assert mn.spectral_spread(mn.DiagonalMajorizer(np.array([24.0, 34.0]))) == 10.0
        assert mn.spectral_spread(mn.DiagonalMajorizer(np.full(5, 3.0))) == 0.0
        assert mn.spectral_spread(mn.DiagonalMajorizer(np.array([1.0, 5.0, 3.0]))) == 4.0

    def test_power_iteration_matches_svd(self, rng):
        mat = rng.standard_normal((10, 6))
        sigma = mn.power_iteration(dense(mat), n_iter=200, tol=1e-12, seed=2)
        assert sigma == pytest.approx(np.linalg.svd(mat, compute_uv=False)[0], rel=1e-6)

    def test_operator_spread_uses_sigma_min_zero(self, rng):
        mat = rng.standard_normal((5, 8))  # rank deficient normal matrix
        spread = mn.spectral_spread(dense(mat))
        assert spread == pytest.approx(np.linalg.svd(mat, compute_uv=False)[0], rel=1e-6)


class TestDiagonalMajorizerType:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            mn.DiagonalMajorizer(np.array([1.0, 0.0]))

    def test_lam_lower_bound(self):
        with pytest.raises(ValueError):
            mn.DiagonalMajorizer(np.ones(2), lam=0.5)

    def test_scaled_diag(self):
        m = mn.DiagonalMajorizer(np.array([2.0, 8.0]), lam=1.5)
        assert np.allclose(m.scaled_diag, [3.0, 12.0])


class TestFeasibleSet:
    def test_box_validation(self):
        with pytest.raises(ValueError):
            mn.FeasibleSet.box(2.0, 1.0)

    def test_projection_variants(self):
        v = np.array([-1.0, 0.5, 2.0])
        assert np.array_equal(mn.FeasibleSet.all().project(v), v)
        assert np.array_equal(mn.FeasibleSet.nonneg().project(v), [0.0, 0.5, 2.0])
        assert np.array_equal(mn.FeasibleSet.box(0, 1).project(v), [0.0, 0.5, 1.0])
