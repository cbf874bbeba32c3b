"""Belief propagation and objectives against sampling oracles; the toy
integer system that motivates coupled planning."""

import numpy as np
import pytest

from safempc.gp import Dataset, KernelSpec, fit
from safempc.performance import (
    GaussianBelief,
    PerformanceObjective,
    discounted_expected_cost,
    expected_saturating_cost,
    exploration_objective,
    moment_propagate,
    propagate_beliefs,
    toy_system_best_safe,
    toy_system_two_stage,
)
from safempc.reachability import AffinePrior


def fitted_gp(rng, beta=2.0, noise=0.1, n=15, d=3, p=2, sv=0.05):
    kern = KernelSpec("matern52", lengthscales=np.full(d, 1.2),
                      signal_variance=sv)
    Z = rng.normal(size=(n, d))
    y = 0.2 * rng.normal(size=(n, p))
    return fit(Dataset(Z, y, noise), [kern] * p, beta=beta)


class TestGaussianBelief:
    def test_clips_tiny_negative_eigenvalues(self):
        cov = np.array([[1.0, 0.0], [0.0, -5e-11]])
        b = GaussianBelief(np.zeros(2), cov)
        assert np.min(np.linalg.eigvalsh(b.cov)) >= 0.0

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            GaussianBelief(np.zeros(2), np.diag([1.0, -1.0]))


class TestMomentPropagate:
    def test_point_belief_reduces_to_prior_step(self):
        rng = np.random.default_rng(0)
        prior = AffinePrior(np.array([[0.9, 0.1], [0.0, 0.8]]),
                            np.array([[0.0], [1.0]]))
        gp = fitted_gp(rng, sv=1e-12, n=0)
        b = GaussianBelief.point(np.array([0.3, -0.2]))
        out = moment_propagate(b, np.array([0.5]), gp, prior)
        assert np.allclose(out.mean, prior.h(b.mean, [0.5]), atol=1e-9)
        # with a (near) zero-variance model the next covariance is just the
        # predictive noise floor
        assert np.all(np.diag(out.cov) <= 1e-10)

    def test_linear_gaussian_case_exact(self):
        rng = np.random.default_rng(1)
        A = np.array([[0.9, 0.2], [-0.1, 0.7]])
        prior = AffinePrior(A, np.array([[0.0], [1.0]]))
        gp = fitted_gp(rng, sv=1e-14, n=0)
        S = np.array([[0.3, 0.1], [0.1, 0.2]])
        b = GaussianBelief(np.array([0.1, 0.2]), S)
        out = moment_propagate(b, np.array([0.0]), gp, prior)
        assert np.allclose(out.cov, A @ S @ A.T, atol=1e-10)

    def test_against_monte_carlo_pushforward(self):
        rng = np.random.default_rng(2)
        prior = AffinePrior(np.array([[0.95, 0.1], [0.05, 0.9]]),
                            np.array([[0.0], [0.5]]))
        gp = fitted_gp(rng, n=12, sv=0.05)
        S0 = np.diag([0.004, 0.006])
        m0 = np.array([0.2, -0.1])
        u = np.array([0.3])
        out = moment_propagate(GaussianBelief(m0, S0), u, gp, prior)
        # sampling oracle: push 1e5 samples through h + mu (the mean map)
        xs = rng.multivariate_normal(m0, S0, size=100_000)
        zs = np.hstack([xs, np.tile(u, (len(xs), 1))])
        mean_gp, _ = gp.predict(zs)
        ys = xs @ prior.A.T + u @ prior.B.T + mean_gp
        mc_mean = ys.mean(axis=0)
        mc_cov = np.cov(ys.T)
        _, sig0 = gp.predict(np.concatenate([m0, u]))
        mc_cov += np.diag(sig0 ** 2)  # predictive noise at the center
        assert np.all(np.abs(out.mean - mc_mean) <= 0.1 * np.abs(mc_mean) + 5e-3)
        assert np.all(np.abs(np.diag(out.cov) - np.diag(mc_cov))
                      <= 0.1 * np.diag(mc_cov) + 1e-4)

    def test_covariance_stays_psd(self):
        rng = np.random.default_rng(3)
        prior = AffinePrior(np.array([[1.0, 0.1], [0.0, 1.0]]),
                            np.array([[0.0], [1.0]]))
        gp = fitted_gp(rng)
        beliefs = propagate_beliefs(np.zeros(2), 0.3 * rng.normal(size=(10, 1)),
                                    gp, prior)
        for b in beliefs:
            assert np.min(np.linalg.eigvalsh(b.cov)) >= -1e-12


class TestExpectedSaturatingCost:
    def test_deterministic_reduction(self):
        m = np.array([0.5, -0.3])
        W = np.diag([1.0, 2.0])
        xg = np.array([0.1, 0.1])
        val = expected_saturating_cost(GaussianBelief.point(m), xg, W)
        d = m - xg
        assert np.isclose(val, 1.0 - np.exp(-0.5 * d @ W @ d), atol=1e-12)

    def test_zero_at_goal(self):
        m = np.array([1.0, 2.0])
        val = expected_saturating_cost(GaussianBelief.point(m), m, np.eye(2))
        assert val == 0.0

    def test_in_unit_interval_and_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            b = GaussianBelief(rng.normal(size=2),
                               np.diag(rng.uniform(0, 2, size=2)))
            val = expected_saturating_cost(b, rng.normal(size=2), np.eye(2))
            assert 0.0 <= val <= 1.0
        vals = [expected_saturating_cost(
            GaussianBelief.point(np.array([r, 0.0])), np.zeros(2), np.eye(2))
            for r in np.linspace(0, 3, 10)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(5)
        for case in range(20):
            p = int(rng.integers(1, 4))
            m = rng.normal(size=p)
            A = rng.normal(size=(p, p))
            S = A @ A.T * 0.3
            Wr = rng.normal(size=(p, p))
            W = Wr @ Wr.T
            xg = rng.normal(size=p)
            val = expected_saturating_cost(GaussianBelief(m, S), xg, W)
            xs = rng.multivariate_normal(m, S, size=1_000_000)
            d = xs - xg
            cs = 1.0 - np.exp(-0.5 * np.einsum("ij,jk,ik->i", d, W, d))
            mc = cs.mean()
            se = cs.std() / np.sqrt(len(cs))
            assert abs(val - mc) <= 3.0 * se + 1e-12, f"case {case}"

    def test_discount_zero_keeps_first_stage_only(self):
        rng = np.random.default_rng(6)
        beliefs = [GaussianBelief(rng.normal(size=2), 0.1 * np.eye(2))
                   for _ in range(5)]
        W = np.eye(2)
        xg = np.zeros(2)
        obj = PerformanceObjective(kind="expected_saturating_cost", goal=xg,
                                   W=W, gamma=0.0)
        total = discounted_expected_cost(beliefs, xg, W, 0.0, horizon=4)
        assert np.isclose(total, expected_saturating_cost(beliefs[0], xg, W))


class TestExplorationObjectives:
    def test_zero_variance_gp_gives_zero(self):
        rng = np.random.default_rng(7)
        gp = fitted_gp(rng, sv=1e-18, n=0)
        obj = exploration_objective("variance_sum", gp)
        assert abs(obj(np.zeros(2), np.zeros(1))) < 1e-8

    def test_maximal_far_from_single_training_point(self):
        kern = KernelSpec("matern52", lengthscales=np.ones(3), signal_variance=1.0)
        gp = fit(Dataset(np.zeros((1, 3)), np.zeros((1, 2)), 0.1), [kern] * 2)
        obj = exploration_objective("variance_sum", gp)
        near = obj(np.zeros(2), np.zeros(1))
        far = obj(np.array([5.0, 5.0]), np.array([5.0]))
        assert far < near  # objective is minimized

    def test_confidence_minus_deviation_shape(self):
        rng = np.random.default_rng(8)
        gp = fitted_gp(rng)
        obj = exploration_objective("confidence_minus_deviation", gp,
                                    Q_perf=np.eye(2))
        beliefs = [GaussianBelief(rng.normal(size=2), 0.1 * np.eye(2))
                   for _ in range(4)]
        centers = [b.mean + 0.1 for b in beliefs]
        val_near = obj(beliefs, [b.mean for b in beliefs])
        val_far = obj(beliefs, [b.mean + 5.0 for b in beliefs])
        assert val_far > val_near  # deviation penalized


class TestToySystem:
    def test_two_stage_gets_stuck(self):
        xs = toy_system_two_stage(x0=0, horizon=3, n_steps=10)
        assert xs == [0] * 11

    def test_coupled_reaches_best_safe_state(self):
        xs = toy_system_best_safe(x0=0, horizon=3, n_steps=10)
        assert xs[0] == 0
        assert xs[-1] == 1
        assert all(x >= 0 for x in xs)

    def test_coupled_collects_reward_every_visit(self):
        # staying at the rewarded state is optimal, not oscillating
        xs = toy_system_best_safe(x0=2, horizon=4, n_steps=8)
        assert xs[-1] == 1
