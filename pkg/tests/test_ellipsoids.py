"""Ellipsoid calculus against Monte-Carlo, grid-search and dense-eigensolver
oracles."""

import numpy as np
import pytest
from scipy.linalg import eigh

from safempc.ellipsoids import (
    DegenerateShapeError,
    Ellipsoid,
    HyperRectangle,
    Polytope,
    affine_transform,
    ellipsoid_in_polytope_residuals,
    max_scaled_distance,
    minkowski_sum_outer,
    rect_to_ellipsoid,
)


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * 0.1 * np.eye(n))


def random_ellipsoid(rng, n, scale=1.0):
    return Ellipsoid(rng.normal(size=n), random_spd(rng, n, scale))


class TestEllipsoidType:
    def test_rejects_asymmetric_shape(self):
        Q = np.array([[1.0, 0.1], [0.3, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            Ellipsoid(np.zeros(2), Q)

    def test_rejects_indefinite_shape(self):
        with pytest.raises(DegenerateShapeError):
            Ellipsoid(np.zeros(2), np.diag([1.0, -1.0]))

    def test_membership_matches_factorization(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            E = random_ellipsoid(rng, 3)
            x = rng.normal(size=3)
            direct = (x - E.center) @ np.linalg.solve(E.shape, x - E.center)
            assert np.isclose(E.quad_form(x), direct, rtol=1e-10)

    def test_boundary_samples_on_boundary(self):
        rng = np.random.default_rng(1)
        E = random_ellipsoid(rng, 4)
        pts = E.sample_boundary(100, rng)
        assert np.allclose(E.quad_form(pts), 1.0, atol=1e-9)


class TestAffineTransform:
    def test_identity_plus_shift(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        out = affine_transform(E, np.eye(2), np.array([1.0, 1.0]))
        assert np.allclose(out.center, [1.0, 1.0])
        assert np.allclose(out.shape, np.eye(2))

    def test_scaling_doubles_semi_axes(self):
        E = Ellipsoid(np.zeros(2), np.diag([1.0, 2.0]))
        out = affine_transform(E, 2.0 * np.eye(2), np.zeros(2))
        assert np.allclose(out.shape, 4.0 * np.diag([1.0, 2.0]))

    def test_rank_deficient_raises(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        with pytest.raises(DegenerateShapeError):
            affine_transform(E, np.array([[1.0, 0.0], [2.0, 0.0]]), np.zeros(2))

    def test_exact_image_membership(self):
        # interior maps inside, boundary maps onto the boundary: the image
        # is exact, not an over-approximation
        rng = np.random.default_rng(2)
        for case in range(100):
            n = rng.integers(2, 5)
            r = rng.integers(1, n + 1)
            E = random_ellipsoid(rng, n)
            A = rng.normal(size=(r, n))
            b = rng.normal(size=r)
            out = affine_transform(E, A, b)
            interior = E.sample_interior(100, rng)
            assert np.all(out.quad_form(interior @ A.T + b) <= 1.0 + 1e-9)
            if r == n:
                boundary = E.sample_boundary(100, rng)
                assert np.allclose(out.quad_form(boundary @ A.T + b), 1.0, atol=1e-9)


class TestMinkowskiSum:
    def test_unit_balls_symmetric(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        out = minkowski_sum_outer(E, E)
        assert np.allclose(out.shape, 4.0 * np.eye(2), atol=1e-12)

    def test_default_c_is_trace_optimal(self):
        rng = np.random.default_rng(3)
        grid = np.arange(1e-4, 10.0 + 1e-9, 1e-4)
        for _ in range(100):
            n = rng.integers(2, 5)
            E1, E2 = random_ellipsoid(rng, n), random_ellipsoid(rng, n)
            t1, t2 = np.trace(E1.shape), np.trace(E2.shape)
            traces = (1.0 + 1.0 / grid) * t1 + (1.0 + grid) * t2
            best = traces.min()
            out = minkowski_sum_outer(E1, E2)
            assert np.trace(out.shape) <= best + 1e-6

    def test_contains_pointwise_sums(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = rng.integers(2, 5)
            E1, E2 = random_ellipsoid(rng, n), random_ellipsoid(rng, n)
            out = minkowski_sum_outer(E1, E2)
            xs = E1.sample_interior(100, rng) + E2.sample_interior(100, rng)
            assert np.all(out.quad_form(xs) <= 1.0 + 1e-9)
        # and boundary-to-boundary sums, the touchy case
        E1, E2 = random_ellipsoid(rng, 3), random_ellipsoid(rng, 3)
        out = minkowski_sum_outer(E1, E2)
        xs = E1.sample_boundary(10_000, rng) + E2.sample_boundary(10_000, rng)
        assert np.all(out.quad_form(xs) <= 1.0 + 1e-9)

    def test_explicit_c_still_contains(self):
        rng = np.random.default_rng(5)
        E1, E2 = random_ellipsoid(rng, 2), random_ellipsoid(rng, 2)
        for c in (0.1, 1.0, 5.0):
            out = minkowski_sum_outer(E1, E2, c=c)
            xs = E1.sample_interior(200, rng) + E2.sample_interior(200, rng)
            assert np.all(out.quad_form(xs) <= 1.0 + 1e-9)


class TestMaxScaledDistance:
    def test_unit_ball_identity(self):
        assert np.isclose(max_scaled_distance(np.eye(3), np.eye(3)), 1.0)

    def test_longest_semi_axis(self):
        assert np.isclose(max_scaled_distance(np.diag([4.0, 1.0]), np.eye(2)), 2.0)

    def test_nan_input_raises(self):
        Q = np.eye(2)
        S = np.array([[np.nan, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            max_scaled_distance(Q, S)

    def test_against_dense_eigensolver(self):
        # dense eigendecomposition of the symmetric reduction L^T S^T S L
        # (the value max ||Sx|| over E(0,Q); the sampling test below pins
        # that semantics independently of any eigensolver)
        rng = np.random.default_rng(6)
        for case in range(200):
            n = rng.integers(1, 7)
            m = rng.integers(n, n + 3)
            Q = random_spd(rng, n, scale=float(rng.uniform(0.1, 10)))
            S = rng.normal(size=(m, n))
            while np.linalg.matrix_rank(S) < n:
                S = rng.normal(size=(m, n))
            B = S @ np.linalg.cholesky(Q)
            expected = np.sqrt(eigh(B.T @ B, eigvals_only=True)[-1])
            got = max_scaled_distance(Q, S)
            assert np.isclose(got, expected, rtol=1e-6), f"case {case}"

    def test_is_attained_upper_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = rng.integers(2, 5)
            Q = random_spd(rng, n)
            S = rng.normal(size=(n + 1, n))
            r = max_scaled_distance(Q, S)
            E = Ellipsoid(np.zeros(n), Q)
            xs = E.sample_boundary(2000, rng)
            norms = np.linalg.norm(xs @ S.T, axis=1)
            assert np.all(norms <= r * (1.0 + 1e-9))
            # the maximizing eigenvector direction attains the bound
            L = np.linalg.cholesky(Q)
            B = S @ L
            _, vecs = eigh(B.T @ B)
            x_star = L @ vecs[:, -1]
            assert np.linalg.norm(S @ x_star) >= r * (1.0 - 1e-4)


class TestRectToEllipsoid:
    def test_square_cover(self):
        out = rect_to_ellipsoid(HyperRectangle(np.zeros(2), np.ones(2)))
        assert np.allclose(out.shape, 2.0 * np.eye(2))
        assert np.isclose(out.quad_form(np.array([1.0, 1.0])), 1.0)

    def test_interval_maps_to_itself(self):
        out = rect_to_ellipsoid(HyperRectangle(np.zeros(1), np.array([3.0])))
        assert np.allclose(out.shape, [[9.0]])

    def test_zero_width_floor(self):
        out = rect_to_ellipsoid(HyperRectangle(np.zeros(2), np.array([1.0, 0.0])))
        assert out.shape[1, 1] > 0.0

    def test_all_corners_inside(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            p = rng.integers(1, 6)
            rect = HyperRectangle(rng.normal(size=p), rng.uniform(0, 2, size=p))
            out = rect_to_ellipsoid(rect)
            assert np.all(out.quad_form(rect.corners()) <= 1.0 + 1e-9)


class TestPolytopeResiduals:
    def test_unit_ball_offset_halfspace(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        P = Polytope(np.array([[1.0, 0.0]]), np.array([2.0]))
        assert np.allclose(ellipsoid_in_polytope_residuals(E, P), [-1.0])

    def test_tangency(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        P = Polytope(np.array([[1.0, 0.0]]), np.array([1.0]))
        assert np.allclose(ellipsoid_in_polytope_residuals(E, P), [0.0], atol=1e-12)

    def test_sign_agrees_with_sampling(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = rng.integers(2, 4)
            E = random_ellipsoid(rng, n)
            m = rng.integers(1, 5)
            H = rng.normal(size=(m, n))
            h = E.center @ H.T + rng.uniform(-1.0, 2.0, size=m) \
                * np.linalg.norm(H @ E.chol, axis=1)
            P = Polytope(H, h)
            res = ellipsoid_in_polytope_residuals(E, P)
            xs = E.sample_interior(5000, rng)
            xs = np.vstack([xs, E.sample_boundary(5000, rng)])
            worst = np.max(xs @ H.T - h, axis=0)
            # residual <= 0 must certify containment
            inside = res <= 0
            assert np.all(worst[inside] <= 1e-9)
            # clearly positive residual must be witnessed by some sample
            violated = res > 1e-3
            assert np.all(worst[violated] > 0)

    def test_box_residuals(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        P = Polytope.box([-2.0, -2.0], [2.0, 2.0])
        assert np.allclose(ellipsoid_in_polytope_residuals(E, P), -1.0)

    def test_monotone_in_ellipsoid_size(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            E = random_ellipsoid(rng, 3)
            P = Polytope(rng.normal(size=(4, 3)), rng.normal(size=4))
            r1 = ellipsoid_in_polytope_residuals(E, P)
            bigger = Ellipsoid(E.center, 1.7 * E.shape)
            r2 = ellipsoid_in_polytope_residuals(bigger, P)
            assert np.all(r2 >= r1 - 1e-12)
