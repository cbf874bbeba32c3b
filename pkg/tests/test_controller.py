"""SafeMPC solver, exact certification and the fallback state machine."""

import numpy as np
import pytest
from scipy.optimize import linprog

from safempc.constraints import ConstraintSet
from safempc.controller import (
    MPCProblem,
    SafeMPCController,
    SafetyPlan,
    SolverConfig,
    certify,
    solve,
)
from safempc.ellipsoids import Polytope
from safempc.envs import lqr_synthesize
from safempc.gp import Dataset, KernelSpec, fit
from safempc.performance import PerformanceObjective
from safempc.reachability import AffinePrior, LipschitzConstants, PropagationScheme


def empty_gp(d, p, beta=0.0, noise=0.1):
    kern = KernelSpec("matern52", lengthscales=np.ones(d), signal_variance=1e-16)
    return fit(Dataset(np.zeros((0, d)), np.zeros((0, p)), noise), [kern] * p,
               beta=beta)


def pendulum_template(env, gp, T, objective=None, lip_g=0.13):
    return MPCProblem(
        horizon=T, x0=np.zeros(2),
        constraints=ConstraintSet(state=env.state_poly, control=env.control_poly,
                                  terminal=env.safe_poly),
        gains=tuple(-env.lqr_gain for _ in range(T)),
        prior=env.prior, gp=gp,
        lipschitz=LipschitzConstants(grad_h=np.zeros(2), g=lip_g),
        objective=objective)


def double_integrator_problem(x0, T=3):
    dt = 0.2
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[dt ** 2 / 2.0], [dt]])
    cons = ConstraintSet(
        state=Polytope.box([-5.0, -5.0], [5.0, 5.0]),
        control=Polytope.box([-1.0], [1.0]),
        terminal=Polytope.box([-0.4, -0.4], [0.4, 0.4]))
    K, _ = lqr_synthesize(A, B, np.eye(2), np.array([[1.0]]))
    return MPCProblem(
        horizon=T, x0=np.asarray(x0, dtype=float), constraints=cons,
        gains=tuple(-K for _ in range(T)),
        prior=AffinePrior(A, B), gp=empty_gp(3, 2),
        lipschitz=LipschitzConstants(grad_h=np.zeros(2)))


def lp_feasible(problem, x0, tube_margin=1e-4) -> bool:
    """LP feasibility of the zero-uncertainty linear MPC instance."""
    A, B = problem.prior.A, problem.prior.B
    T = problem.horizon
    p, q = 2, 1
    n = T * q
    # x_t = A^t x0 + sum_j A^{t-1-j} B k_j
    rows, rhs = [], []
    cons = problem.constraints
    for t in range(1, T + 1):
        xt_base = np.linalg.matrix_power(A, t) @ np.asarray(x0, dtype=float)
        coef = np.zeros((p, n))
        for j in range(t):
            coef[:, j * q:(j + 1) * q] = np.linalg.matrix_power(A, t - 1 - j) @ B
        polys = [cons.state] if t < T else [cons.terminal]
        for poly in polys:
            if poly is None:
                continue
            rows.append(poly.H @ coef)
            rhs.append(poly.h - poly.H @ xt_base - tube_margin)
    U = cons.control
    for t in range(T):
        coef = np.zeros((U.num_rows, n))
        coef[:, t * q:(t + 1) * q] = U.H
        rows.append(coef)
        rhs.append(U.h - tube_margin)
    res = linprog(np.zeros(n), A_ub=np.vstack(rows), b_ub=np.concatenate(rhs),
                  bounds=[(None, None)] * n, method="highs")
    return bool(res.success)


class TestSolve:
    def test_do_nothing_plan_feasible_inside_safe_set(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=1, lip_g=0.0)
        plan = solve(problem, None, SolverConfig(multistarts=3, seed=0))
        assert plan.feasible and plan.certified
        assert plan.residuals.max_residual <= 1e-6
        assert np.all(plan.residuals.terminal < 0.0)

    def test_fallen_pendulum_is_infeasible(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=1)
        problem = problem.with_state(np.array([np.pi, 0.0]))
        plan = solve(problem, None, SolverConfig(multistarts=5, seed=1))
        assert not plan.feasible
        # exhaustive grid over the only decision variable confirms there is
        # no feasible input at all
        for k0 in np.linspace(-1.0, 1.0, 201):
            report, _, _ = certify(np.array([[k0]]), problem)
            assert report.max_residual > 1e-6

    def test_zero_uncertainty_matches_lp_oracle(self):
        rng = np.random.default_rng(2)
        agree = 0
        for _ in range(12):
            x0 = rng.uniform(-1.5, 1.5, size=2)
            problem = double_integrator_problem(x0)
            lp = lp_feasible(problem, x0)
            plan = solve(problem, None, SolverConfig(multistarts=8, seed=3))
            if plan.feasible == lp:
                agree += 1
            elif lp and not plan.feasible:
                # the penalty solver may miss a marginally feasible point;
                # that is a performance bug, not a safety bug. Require the
                # LP certificate to be re-checkable through certify.
                pytest.fail(f"solver missed LP-feasible instance at {x0}")
        assert agree >= 11  # conservative side may disagree at most rarely

    def test_nan_state_rejected_at_construction(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=2)
        with pytest.raises(ValueError):
            problem.with_state(np.array([np.nan, 0.0]))


class TestCertify:
    def test_exact_and_deterministic(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=3)
        ks = np.array([[0.1], [0.05], [0.0]])
        r1, e1, l1 = certify(ks, problem)
        r2, e2, l2 = certify(ks, problem)
        assert r1.max_residual == r2.max_residual
        assert all(np.array_equal(a.center, b.center) for a, b in zip(e1, e2))

    def test_perturbation_flips_certificate(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=1, lip_g=0.0)
        plan = solve(problem, None, SolverConfig(multistarts=3, seed=4))
        assert plan.feasible
        # large feed-forward: control stays in bounds but the terminal
        # ellipsoid leaves the safe set; report identifies the row
        bad_ks = plan.ks + 10.0
        report, _, _ = certify(bad_ks, problem)
        assert report.max_residual > 1e-6
        kind, _, row, val = report.worst()
        assert kind in ("terminal", "control")
        assert val == report.max_residual

    def test_solve_marks_feasible_only_if_certified(self, pendulum_env):
        gp = empty_gp(3, 2)
        problem = pendulum_template(pendulum_env, gp, T=2)
        plan = solve(problem, None, SolverConfig(multistarts=2, seed=5))
        if plan.feasible:
            report, _, _ = certify(plan.ks, problem)
            assert report.max_residual <= 1e-6


def always_infeasible(problem, warm_start, config, rng):
    return SafetyPlan(laws=tuple(), ellipsoids=tuple(), residuals=None,
                      feasible=False, certified=False)


class TestControllerStateMachine:
    def test_infeasible_from_start_applies_backup_forever(self, pendulum_env):
        gp = empty_gp(3, 2)
        template = pendulum_template(pendulum_env, gp, T=3)
        ctrl = SafeMPCController(template, pendulum_env.lqr_gain,
                                 SolverConfig(multistarts=1, seed=6),
                                 solve_fn=always_infeasible)
        x = np.array([0.05, -0.1])
        for _ in range(6):
            res = ctrl.step(x)
            assert not res.solved
            assert np.allclose(res.u, -pendulum_env.lqr_gain @ x)
            assert len(ctrl.plan.laws) == 3
            x = pendulum_env.true_step(x, res.u)
        assert ctrl.age == 3  # saturates at the horizon

    def test_certified_plan_replayed_after_failures(self, pendulum_env):
        gp = empty_gp(3, 2)
        T = 3
        template = pendulum_template(pendulum_env, gp, T=T, lip_g=0.0)
        calls = {"n": 0}

        def solve_once_then_fail(problem, warm_start, config, rng):
            calls["n"] += 1
            if calls["n"] == 1:
                return solve(problem, warm_start, config, rng)
            return always_infeasible(problem, warm_start, config, rng)

        ctrl = SafeMPCController(template, pendulum_env.lqr_gain,
                                 SolverConfig(multistarts=3, seed=7),
                                 solve_fn=solve_once_then_fail)
        x = np.array([0.08, 0.0])
        first = ctrl.step(x)
        assert first.solved
        planned_laws = first.plan.laws
        x = pendulum_env.true_step(x, first.u)
        # subsequent steps replay the certified tail with frozen anchors
        for t in range(1, T):
            res = ctrl.step(x)
            assert not res.solved
            law = res.plan.laws[0]
            assert np.array_equal(law.k, planned_laws[t].k)
            assert np.array_equal(law.anchor, planned_laws[t].anchor)
            assert len(res.plan.laws) == T
            x = pendulum_env.true_step(x, res.u)
        # after T shifts only the backup policy remains
        res = ctrl.step(x)
        assert np.allclose(res.u, -pendulum_env.lqr_gain @ x)
        # the certified return route ends inside the terminal set
        assert bool(pendulum_env.safe_poly.contains(x))

    def test_age_resets_on_feasible_solve(self, pendulum_env):
        gp = empty_gp(3, 2)
        template = pendulum_template(pendulum_env, gp, T=2, lip_g=0.0)
        toggle = {"feasible": False}

        def alternating(problem, warm_start, config, rng):
            toggle["feasible"] = not toggle["feasible"]
            if toggle["feasible"]:
                return solve(problem, warm_start, config, rng)
            return always_infeasible(problem, warm_start, config, rng)

        ctrl = SafeMPCController(template, pendulum_env.lqr_gain,
                                 SolverConfig(multistarts=2, seed=8),
                                 solve_fn=alternating)
        x = np.array([0.03, 0.0])
        ages = []
        for _ in range(6):
            res = ctrl.step(x)
            ages.append(ctrl.age)
            x = pendulum_env.true_step(x, res.u)
        assert ages[0] == 0 and ages[1] == 1 and ages[2] == 0

    def test_plan_length_invariant_any_pattern(self, pendulum_env):
        gp = empty_gp(3, 2)
        template = pendulum_template(pendulum_env, gp, T=4, lip_g=0.0)
        rng_fail = np.random.default_rng(9)

        def random_failures(problem, warm_start, config, rng):
            if rng_fail.uniform() < 0.5:
                return always_infeasible(problem, warm_start, config, rng)
            return solve(problem, warm_start, config, rng)

        ctrl = SafeMPCController(template, pendulum_env.lqr_gain,
                                 SolverConfig(multistarts=1, seed=10),
                                 solve_fn=random_failures)
        x = np.array([0.05, 0.05])
        for _ in range(10):
            res = ctrl.step(x)
            assert len(ctrl.plan.laws) == 4
            x = pendulum_env.true_step(x, res.u)

    def test_seed_determinism(self, pendulum_env):
        rng = np.random.default_rng(11)
        kern = KernelSpec("sum", lengthscales=[1.0, 1.5, 1.0],
                          signal_variance=0.01, linear_weights=[0.01] * 3)
        Z = rng.normal(size=(20, 3)) * 0.3
        y = 0.02 * rng.normal(size=(20, 2))
        gp = fit(Dataset(Z, y, 0.05), [kern] * 2, beta=2.0)
        template = pendulum_template(pendulum_env, gp, T=2)
        obj = PerformanceObjective(kind="variance_sum")
        template = template.with_objective(obj)

        def run():
            ctrl = SafeMPCController(template, pendulum_env.lqr_gain,
                                     SolverConfig(multistarts=3, seed=12))
            x = np.array([0.02, 0.0])
            us = []
            for _ in range(5):
                res = ctrl.step(x)
                us.append(float(res.u[0]))
                x = pendulum_env.true_step(x, res.u)
            return us

        assert run() == run()
