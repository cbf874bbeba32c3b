"""Constraint residuals against Monte-Carlo membership oracles."""

import numpy as np
import pytest

from safempc.constraints import (
    ConstraintSet,
    control_residuals,
    state_residuals,
    terminal_residuals,
)
from safempc.ellipsoids import Ellipsoid, Polytope
from safempc.reachability import FeedbackLaw


def random_ellipsoid(rng, n):
    A = rng.normal(size=(n, n))
    return Ellipsoid(rng.normal(size=n), A @ A.T + 0.3 * np.eye(n))


class TestConstraintSet:
    def test_terminal_must_be_inside_state(self):
        state = Polytope.box([-1.0, -1.0], [1.0, 1.0])
        bad_terminal = Polytope.box([-2.0, -0.5], [0.5, 0.5])
        with pytest.raises(ValueError, match="violates state constraint"):
            ConstraintSet(state=state, control=Polytope.box([-1.0], [1.0]),
                          terminal=bad_terminal)

    def test_unbounded_state_accepts_any_terminal(self):
        cs = ConstraintSet(state=None, control=Polytope.box([-1.0], [1.0]),
                           terminal=Polytope.box([-5.0, -5.0], [5.0, 5.0]))
        assert cs.state is None

    def test_rows_are_normalized(self):
        state = Polytope(np.array([[2.0, 0.0], [0.0, -4.0]]), np.array([4.0, 4.0]))
        cs = ConstraintSet(state=state, control=Polytope.box([-1.0], [1.0]),
                           terminal=Polytope.box([-0.5, -0.5], [0.5, 0.5]))
        assert np.allclose(np.linalg.norm(cs.state.H, axis=1), 1.0)


class TestStateResiduals:
    def test_unbounded_gives_empty(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        assert state_residuals(E, None).shape == (0,)

    def test_unit_ball_in_box(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        X = Polytope.box([-2.0, -2.0], [2.0, 2.0])
        assert np.allclose(state_residuals(E, X), -1.0)

    def test_sign_agreement_with_sampling(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            E = random_ellipsoid(rng, 3)
            H = rng.normal(size=(5, 3))
            h = E.center @ H.T + rng.uniform(-0.5, 1.5, size=5) \
                * np.linalg.norm(H @ E.chol, axis=1)
            X = Polytope(H, h)
            res = state_residuals(E, X)
            xs = np.vstack([E.sample_interior(20_000, rng),
                            E.sample_boundary(20_000, rng)])
            worst = np.max(xs @ H.T - h, axis=0)
            assert np.all(worst[res <= 0] <= 1e-9)
            assert np.all(worst[res > 1e-3] > 0)


class TestControlResiduals:
    def test_zero_feedback_is_pointwise(self):
        E = Ellipsoid(np.array([1.0, 2.0]), np.eye(2))
        law = FeedbackLaw(np.zeros((1, 2)), np.array([0.7]), E.center)
        U = Polytope.box([-1.0], [1.0])
        res = control_residuals(E, law, U)
        assert np.allclose(res, [0.7 - 1.0, -0.7 - 1.0])

    def test_identity_feedback_tangency(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))
        law = FeedbackLaw(np.eye(2), np.zeros(2), np.zeros(2))
        U = Polytope.box([-1.0, -1.0], [1.0, 1.0])
        res = control_residuals(E, law, U)
        assert np.allclose(res, 0.0, atol=1e-12)

    def test_sign_agreement_with_sampling(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            E = random_ellipsoid(rng, 2)
            K = rng.normal(size=(2, 2))
            k = rng.normal(size=2)
            law = FeedbackLaw(K, k, E.center)
            H = rng.normal(size=(4, 2))
            h = k @ H.T + rng.uniform(-0.5, 1.5, size=4) \
                * np.linalg.norm(H @ K @ E.chol, axis=1)
            U = Polytope(H, h)
            res = control_residuals(E, law, U)
            xs = np.vstack([E.sample_interior(20_000, rng),
                            E.sample_boundary(20_000, rng)])
            us = (xs - E.center) @ K.T + k
            worst = np.max(us @ H.T - h, axis=0)
            assert np.all(worst[res <= 0] <= 1e-9)
            assert np.all(worst[res > 1e-3] > 0)


class TestTerminalResiduals:
    def test_matches_state_residual_form(self):
        rng = np.random.default_rng(2)
        E = random_ellipsoid(rng, 2)
        P = Polytope.box([-4.0, -4.0], [4.0, 4.0])
        assert np.allclose(terminal_residuals(E, P), state_residuals(E, P))

    def test_monotone_in_scale(self):
        rng = np.random.default_rng(3)
        E = random_ellipsoid(rng, 2)
        P = Polytope.box([-3.0, -3.0], [3.0, 3.0])
        r1 = terminal_residuals(E, P)
        r2 = terminal_residuals(Ellipsoid(E.center, 2.0 * E.shape), P)
        assert np.all(r2 >= r1)
