"""Receding-horizon SafeMPC with exact certification and a certified fallback.

The solver is a multi-start quadratic-penalty quasi-Newton method over the
feed-forward inputs (plus the performance inputs when a performance
trajectory is attached, plus the initial state in static exploration). It
is free to be sloppy: every candidate plan is re-propagated exactly through
the reference reachability module, and only plans whose worst residual
passes the feasibility tolerance are ever marked feasible. Safety therefore
rests on certification and the fallback shift, never on solver quality.

Fallback logic: while no new feasible plan exists, the previous plan is
shifted one step and the backup policy appended, so at any time the stored
plan is a certified return route to the terminal set followed by backup
control.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import linprog, minimize

from . import _compiled as fast
from .constraints import ConstraintSet, control_residuals, state_residuals, terminal_residuals
from .ellipsoids import Ellipsoid
from .gp import GPPosterior
from .performance import (
    GaussianBelief,
    PerformanceObjective,
    discounted_expected_cost,
    propagate_beliefs,
)
from .reachability import (
    AffinePrior,
    FeedbackLaw,
    LipschitzConstants,
    PropagationScheme,
    multi_step,
    point_ellipsoid,
)

__all__ = [
    "SolverConfig",
    "PerformanceSpec",
    "MPCProblem",
    "ResidualReport",
    "SafetyPlan",
    "SafeMPCController",
    "solve",
    "certify",
]

_BIG = 1e12


@dataclass(frozen=True)
class SolverConfig:
    """Penalty solver settings, loadable from config files."""

    multistarts: int = 25
    max_iters: int = 40
    penalty_schedule: tuple[float, ...] = (1e2, 1e4, 1e6)
    tol_feas: float = 1e-6
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "penalty_schedule" in d:
            d["penalty_schedule"] = tuple(float(v) for v in d["penalty_schedule"])
        return cls(**d)


@dataclass(frozen=True)
class PerformanceSpec:
    """Performance-trajectory attachment: horizon H and coupling length r."""

    horizon: int
    coupling: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.coupling < 1:
            raise ValueError("performance horizon and coupling must be >= 1")


@dataclass(frozen=True)
class MPCProblem:
    """One instance of the safety (plus optional performance) MPC problem."""

    horizon: int
    x0: np.ndarray
    constraints: ConstraintSet
    gains: tuple[np.ndarray, ...]
    prior: object
    gp: GPPosterior
    lipschitz: LipschitzConstants
    scheme: PropagationScheme = PropagationScheme.LOCALLY_CONSTANT
    objective: PerformanceObjective | Callable | None = None
    perf: PerformanceSpec | None = None
    optimize_x0: bool = False
    x0_box: np.ndarray | None = None  # (p, 2) search box when optimize_x0
    point_eps: float = 1e-9

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("safety horizon must be >= 1")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x0)):
            raise ValueError("non-finite current state")
        gains = tuple(np.atleast_2d(np.asarray(K, dtype=float)) for K in self.gains)
        if len(gains) != self.horizon:
            raise ValueError("need one feedback gain per step")
        q = self.constraints.control_dim
        p = x0.shape[0]
        for K in gains:
            if K.shape != (q, p):
                raise ValueError(f"gain must be {q}x{p}, got {K.shape}")
        if self.perf is not None and self.perf.coupling > min(self.horizon, self.perf.horizon):
            raise ValueError("coupling length exceeds min(T, H)")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "gains", gains)

    @property
    def state_dim(self) -> int:
        return self.x0.shape[0]

    @property
    def control_dim(self) -> int:
        return self.constraints.control_dim

    def with_state(self, x0) -> "MPCProblem":
        return replace(self, x0=np.asarray(x0, dtype=float).reshape(-1))

    def with_objective(self, objective, perf="keep") -> "MPCProblem":
        if perf == "keep":
            return replace(self, objective=objective)
        return replace(self, objective=objective, perf=perf)

    def control_box(self) -> np.ndarray:
        """Per-axis (lo, hi) bounds of the control polytope, via LPs."""
        U = self.constraints.control
        q = U.dim
        box = np.empty((q, 2))
        for i in range(q):
            e = np.zeros(q)
            e[i] = 1.0
            lo = linprog(e, A_ub=U.H, b_ub=U.h, bounds=[(None, None)] * q,
                         method="highs")
            hi = linprog(-e, A_ub=U.H, b_ub=U.h, bounds=[(None, None)] * q,
                         method="highs")
            box[i, 0] = lo.fun if lo.success else -_BIG
            box[i, 1] = -hi.fun if hi.success else _BIG
        return box


@dataclass(frozen=True)
class ResidualReport:
    """Exact constraint residuals of a propagated plan."""

    state: np.ndarray      # (T-1, mx)
    control: np.ndarray    # (T, mu)
    terminal: np.ndarray   # (ms,)

    @property
    def max_residual(self) -> float:
        parts = [self.state.ravel(), self.control.ravel(), self.terminal.ravel()]
        vals = np.concatenate([v for v in parts if v.size])
        return float(np.max(vals)) if vals.size else -np.inf

    def worst(self) -> tuple[str, int, int, float]:
        """(kind, step, row, value) of the largest residual."""
        best = ("none", -1, -1, -np.inf)
        for kind, arr in (("state", self.state), ("control", self.control)):
            if arr.size:
                idx = np.unravel_index(np.argmax(arr), arr.shape)
                if arr[idx] > best[3]:
                    best = (kind, int(idx[0]), int(idx[1]), float(arr[idx]))
        if self.terminal.size:
            i = int(np.argmax(self.terminal))
            if self.terminal[i] > best[3]:
                best = ("terminal", -1, i, float(self.terminal[i]))
        return best


@dataclass(frozen=True)
class SafetyPlan:
    """A horizon-T sequence of feedback laws with its certification record."""

    laws: tuple[FeedbackLaw, ...]
    ellipsoids: tuple[Ellipsoid, ...]
    residuals: ResidualReport | None
    feasible: bool
    certified: bool
    objective_value: float = np.inf
    x0: np.ndarray | None = None
    perf_inputs: np.ndarray | None = None

    def __post_init__(self):
        if self.certified and self.residuals is None:
            raise ValueError("certified plan requires a residual report")

    @property
    def horizon(self) -> int:
        return len(self.laws)

    @property
    def ks(self) -> np.ndarray:
        return np.array([law.k for law in self.laws])

    def first_input(self, x) -> np.ndarray:
        return self.laws[0](x)


def certify(plan_or_ks, problem: MPCProblem):
    """Exact re-propagation and residual evaluation of a plan.

    Independent of solver internals: goes through the reference
    reachability and constraint modules only. Returns (report, ellipsoids,
    laws-with-anchors). This is the artifact's ground truth for feasibility.
    """
    if isinstance(plan_or_ks, SafetyPlan):
        ks = plan_or_ks.ks
    else:
        ks = np.asarray(plan_or_ks, dtype=float).reshape(problem.horizon, -1)
    T = problem.horizon
    R0 = point_ellipsoid(problem.x0, problem.point_eps)
    laws = [FeedbackLaw(problem.gains[t], ks[t], np.zeros(problem.state_dim))
            for t in range(T)]
    ells = multi_step(R0, laws, problem.prior, problem.gp, problem.lipschitz,
                      problem.scheme)
    anchors = [R0.center] + [e.center for e in ells[:-1]]
    laws = [law.re_anchored(a) for law, a in zip(laws, anchors)]
    cons = problem.constraints
    mx = cons.state.num_rows if cons.state is not None else 0
    state_res = np.zeros((T - 1, mx))
    for t in range(1, T):
        state_res[t - 1] = state_residuals(ells[t - 1], cons.state)
    ctrl_res = np.zeros((T, cons.control.num_rows))
    tubes = [R0] + list(ells[:-1])
    for t in range(T):
        ctrl_res[t] = control_residuals(tubes[t], laws[t], cons.control)
    term_res = terminal_residuals(ells[-1], cons.terminal)
    report = ResidualReport(state=state_res, control=ctrl_res, terminal=term_res)
    return report, tuple(ells), tuple(laws)


# ---------------------------------------------------------------------------
# Fast objective/residual evaluation for the penalty solver.

class _Evaluator:
    """Packs a problem into plain arrays and evaluates decision vectors.

    Decision vector layout: [x0 (p, only when optimize_x0)] [k_0..k_{T-1}]
    [u_perf_r..u_perf_{H-1}]; the first r performance inputs are the shared
    feed-forward terms.
    """

    def __init__(self, problem: MPCProblem):
        self.problem = problem
        p, q, T = problem.state_dim, problem.control_dim, problem.horizon
        self.p, self.q, self.T = p, q, T
        self.H = problem.perf.horizon if problem.perf is not None else 0
        self.r = problem.perf.coupling if problem.perf is not None else 0
        self.n_x0 = p if problem.optimize_x0 else 0
        self.n_vars = self.n_x0 + T * q + max(self.H - self.r, 0) * q

        prior = problem.prior
        if not isinstance(prior, AffinePrior):
            raise TypeError("fast path requires an affine prior")
        self.Ah, self.Bh, self.ch = prior.A, prior.B, prior.c
        self.Kfb = np.stack(problem.gains)

        gp = problem.gp
        fam = {"linear": fast.FAM_LINEAR, "matern52": fast.FAM_MATERN,
               "sum": fast.FAM_SUM}[gp.kernels[0].family]
        if any(k.family != gp.kernels[0].family for k in gp.kernels):
            raise TypeError("fast path requires a shared kernel family")
        self.family = fam
        self.Zt = gp.data.Z
        n = gp.n
        self.alphas = np.zeros((gp.output_dim, n))
        self.chols = np.zeros((gp.output_dim, n, n))
        for j in range(gp.output_dim):
            if n:
                self.alphas[j] = gp._weights[j]
                self.chols[j] = gp._chols[j]
        self.ls = np.stack([k.lengthscales for k in gp.kernels])
        self.sv = np.array([k.signal_variance for k in gp.kernels])
        self.lw = np.stack([k.linear_weights for k in gp.kernels])
        self.beta = gp.beta
        # identical kernels across outputs share cross-covariances and the
        # Gram factor inside the compiled chains
        self.shared = bool(
            all(np.array_equal(self.ls[j], self.ls[0])
                and self.sv[j] == self.sv[0]
                and np.array_equal(self.lw[j], self.lw[0])
                for j in range(gp.output_dim))
            and all(np.array_equal(self.chols[j], self.chols[0])
                    for j in range(gp.output_dim)))

        lip = problem.lipschitz
        self.lip_gh, self.lip_g = lip.grad_h, lip.g
        self.lip_gmu, self.lip_sig = lip.grad_mu, lip.sigma
        self.use_g_matrix = lip.g_matrix is not None
        p_, q_ = problem.state_dim, problem.control_dim
        self.lip_g_matrix = lip.g_matrix if self.use_g_matrix \
            else np.zeros((p_, p_ + q_))
        self.scheme = 0 if problem.scheme is PropagationScheme.LOCALLY_CONSTANT else 1

        cons = problem.constraints
        if cons.state is not None:
            self.HX, self.hX = cons.state.H, cons.state.h
        else:
            self.HX, self.hX = np.zeros((0, p)), np.zeros(0)
        self.HU, self.hU = cons.control.H, cons.control.h
        self.HS, self.hS = cons.terminal.H, cons.terminal.h

        obj = problem.objective
        if obj is None:
            obj = PerformanceObjective(kind="center_tracking",
                                       goal=np.zeros(p), W=np.zeros((p, p)))
        if not isinstance(obj, PerformanceObjective):
            raise TypeError("fast path requires a declarative objective")
        self.obj = obj
        self.goal = obj.goal if obj.goal is not None else np.zeros(p)
        self.W = obj.W if obj.W is not None else np.eye(p)
        self.Qperf = obj.Q_perf if obj.Q_perf is not None else np.eye(p)
        self.gamma = obj.gamma
        if obj.kind in ("expected_saturating_cost", "confidence_minus_deviation") \
                and self.H == 0:
            raise ValueError(f"objective {obj.kind} needs a performance trajectory")

    def split(self, v: np.ndarray):
        i = self.n_x0
        x0 = v[:i] if self.n_x0 else self.problem.x0
        ks = v[i:i + self.T * self.q].reshape(self.T, self.q)
        free = v[i + self.T * self.q:].reshape(-1, self.q)
        return np.ascontiguousarray(x0), np.ascontiguousarray(ks), free

    def perf_inputs(self, ks, free) -> np.ndarray:
        return np.ascontiguousarray(np.vstack([ks[:self.r], free])) if self.H else None

    def residuals_and_objective(self, v: np.ndarray):
        x0, ks, free = self.split(v)
        res, centers, shapes, ok = fast.safety_chain(
            x0, self.problem.point_eps, ks, self.Kfb, self.Ah, self.Bh, self.ch,
            self.lip_gh, self.lip_g, self.lip_g_matrix, self.use_g_matrix,
            self.lip_gmu, self.lip_sig, self.scheme,
            self.beta, self.Zt, self.alphas, self.chols, self.family,
            self.ls, self.sv, self.lw,
            self.HX, self.hX, self.HU, self.hU, self.HS, self.hS, self.shared)
        if not ok:
            return _BIG, np.full(res.shape, _BIG)
        kind = self.obj.kind
        if kind == "center_tracking":
            J = fast.center_tracking_cost(centers, self.W, self.goal, self.T)
        elif kind == "variance_sum":
            z = np.concatenate([x0, ks[0]])
            mu = np.empty(self.alphas.shape[0])
            sig = np.empty(self.alphas.shape[0])
            fast.gp_mean_sigma(self.Zt, self.alphas, self.chols, self.family,
                               self.ls, self.sv, self.lw, z, mu, sig, self.shared)
            J = -float(np.sum(sig))
        else:
            us = self.perf_inputs(ks, free)
            means, covs = fast.belief_chain(
                x0, us, self.Ah, self.Bh, self.ch, self.Zt, self.alphas,
                self.chols, self.family, self.ls, self.sv, self.lw, self.shared)
            if kind == "expected_saturating_cost":
                J = fast.expected_saturating_sum(means, covs, self.W, self.goal,
                                                 self.gamma, self.H)
            else:
                J = -fast.confidence_minus_deviation(means, covs, centers,
                                                     self.Qperf, self.T, self.H)
        if not np.isfinite(J):
            return _BIG, res
        return float(J), res


class _SlowEvaluator:
    """Reference-path evaluator for callable objectives or nonlinear priors."""

    def __init__(self, problem: MPCProblem):
        self.problem = problem
        p, q, T = problem.state_dim, problem.control_dim, problem.horizon
        self.p, self.q, self.T = p, q, T
        self.H = problem.perf.horizon if problem.perf is not None else 0
        self.r = problem.perf.coupling if problem.perf is not None else 0
        self.n_x0 = p if problem.optimize_x0 else 0
        self.n_vars = self.n_x0 + T * q + max(self.H - self.r, 0) * q

    def split(self, v):
        i = self.n_x0
        x0 = v[:i] if self.n_x0 else self.problem.x0
        ks = v[i:i + self.T * self.q].reshape(self.T, self.q)
        free = v[i + self.T * self.q:].reshape(-1, self.q)
        return x0, ks, free

    def residuals_and_objective(self, v):
        prob = self.problem
        x0, ks, free = self.split(v)
        prob_here = prob if not prob.optimize_x0 else prob.with_state(x0)
        try:
            report, ells, laws = certify(ks, prob_here)
        except (ValueError, np.linalg.LinAlgError):
            n_res = 1
            return _BIG, np.full(n_res, _BIG)
        res = np.concatenate([report.state.ravel(), report.control.ravel(),
                              report.terminal.ravel()])
        beliefs = None
        if self.H:
            us = np.vstack([ks[:self.r], free])
            beliefs = propagate_beliefs(x0, us, prob.gp, prob.prior)
        obj = prob.objective
        if obj is None:
            J = 0.0
        elif isinstance(obj, PerformanceObjective):
            centers = [x0] + [e.center for e in ells]
            if obj.kind == "center_tracking":
                J = sum(float((c - obj.goal) @ obj.W @ (c - obj.goal))
                        for c in centers[:self.T])
            elif obj.kind == "variance_sum":
                _, sig = prob.gp.predict(np.concatenate([x0, ks[0]]))
                J = -float(np.sum(sig))
            elif obj.kind == "expected_saturating_cost":
                J = discounted_expected_cost(beliefs, obj.goal, obj.W, obj.gamma,
                                             horizon=self.H)
            else:
                gain = sum(float(np.sum(np.sqrt(np.maximum(
                    np.linalg.eigvalsh(b.cov), 0.0)))) for b in beliefs)
                Qp = obj.Q_perf if obj.Q_perf is not None else np.eye(self.p)
                dev = 0.0
                for t in range(1, min(self.T, self.H) + 1):
                    diff = beliefs[t].mean - ells[t - 1].center
                    dev += float(diff @ Qp @ diff)
                J = -(gain - dev)
        else:
            centers = [x0] + [e.center for e in ells]
            J = float(obj(x0=x0, ks=ks, ellipsoids=ells, centers=centers,
                          beliefs=beliefs))
        return J, res


def _make_evaluator(problem: MPCProblem):
    try:
        return _Evaluator(problem)
    except TypeError:
        return _SlowEvaluator(problem)


def solve(problem: MPCProblem, warm_start: SafetyPlan | None = None,
          config: SolverConfig | None = None,
          rng: np.random.Generator | None = None) -> SafetyPlan:
    """Multi-start quadratic-penalty solve of the MPC problem.

    Candidate solutions are optimized against the (fast) penalty
    objective, then re-checked exactly via `certify`; a plan is feasible
    only if its exact worst residual is within config.tol_feas. Solver
    failures degrade to an infeasible plan, never an exception.
    """
    config = config or SolverConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ev = _make_evaluator(problem)
    T, q, p = problem.horizon, problem.control_dim, problem.state_dim
    u_box = problem.control_box()
    u_lo, u_hi = u_box[:, 0], u_box[:, 1]

    def random_vector():
        parts = []
        if problem.optimize_x0:
            box = problem.x0_box
            if box is None:
                box = np.stack([problem.x0 - 1.0, problem.x0 + 1.0], axis=1)
            parts.append(rng.uniform(box[:, 0], box[:, 1]))
        n_inputs = T + max(ev.H - ev.r, 0)
        draws = rng.uniform(u_lo, u_hi, size=(n_inputs, q))
        parts.append(draws.reshape(-1))
        return np.concatenate(parts)

    starts = []
    if warm_start is not None and warm_start.horizon == T:
        parts = []
        if problem.optimize_x0:
            parts.append(problem.x0.copy())
        parts.append(warm_start.ks.reshape(-1))
        if ev.H:
            prev = warm_start.perf_inputs
            if prev is not None and prev.shape == (ev.H, q):
                free = np.vstack([prev[ev.r + 1:], prev[-1:]]) if ev.H > ev.r \
                    else np.zeros((0, q))
                parts.append(free.reshape(-1))
            else:
                parts.append(np.zeros(max(ev.H - ev.r, 0) * q))
        v = np.concatenate(parts)
        if v.shape[0] == ev.n_vars:
            starts.append(v)
    while len(starts) < max(config.multistarts, 1):
        starts.append(random_vector())

    def penalty_value(v, rho):
        J, res = ev.residuals_and_objective(v)
        if not np.isfinite(J):
            return _BIG
        viol = np.maximum(res, 0.0)
        return J + rho * float(viol @ viol)

    best_plan: SafetyPlan | None = None
    best_key = (1, _BIG, _BIG)  # (0 feasible / 1 not, max_residual clip, objective)
    for v0 in starts:
        v = np.asarray(v0, dtype=float)
        try:
            for rho in config.penalty_schedule:
                out = minimize(penalty_value, v, args=(rho,), method="L-BFGS-B",
                               options={"maxiter": config.max_iters,
                                        "maxfun": config.max_iters * (ev.n_vars + 2) * 3})
                v = out.x
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if not np.all(np.isfinite(v)):
            continue
        x0_v, ks, free = ev.split(v)
        prob_here = problem if not problem.optimize_x0 else problem.with_state(x0_v)
        try:
            report, ells, laws = certify(ks, prob_here)
        except (ValueError, np.linalg.LinAlgError):
            continue
        max_res = report.max_residual
        feasible = bool(max_res <= config.tol_feas)
        J, _ = ev.residuals_and_objective(v)
        key = (0 if feasible else 1, 0.0 if feasible else max_res, J)
        if key < best_key:
            best_key = key
            perf_us = ev.perf_inputs(ks, free) if ev.H else None
            best_plan = SafetyPlan(
                laws=laws, ellipsoids=ells, residuals=report,
                feasible=feasible, certified=True, objective_value=J,
                x0=np.asarray(x0_v, dtype=float).copy(), perf_inputs=perf_us)
    if best_plan is None:
        return SafetyPlan(laws=tuple(), ellipsoids=tuple(), residuals=None,
                          feasible=False, certified=False)
    return best_plan


@dataclass
class StepResult:
    u: np.ndarray
    solved: bool
    plan_age: int
    plan: SafetyPlan


class SafeMPCController:
    """Feasible / shift-fallback state machine around the MPC solver.

    The stored plan always has exactly T entries. A feasible solve replaces
    it and resets the age; otherwise it is shifted left with the backup
    policy appended (frozen anchors: the certificate was issued for them).
    The initial plan is T copies of the backup policy, so starting inside
    the terminal safe set is safe even if the solver never succeeds.
    """

    def __init__(self, template: MPCProblem, pi_safe_gain,
                 config: SolverConfig | None = None,
                 solve_fn: Callable = solve):
        self.template = template
        self.config = config or SolverConfig()
        self.solve_fn = solve_fn
        K = np.atleast_2d(np.asarray(pi_safe_gain, dtype=float))
        p, q = template.state_dim, template.control_dim
        self._pi_safe_law = FeedbackLaw(-K, np.zeros(q), np.zeros(p))
        self.rng = np.random.default_rng(self.config.seed)
        self.plan = SafetyPlan(
            laws=tuple([self._pi_safe_law] * template.horizon),
            ellipsoids=tuple(), residuals=None, feasible=False, certified=False)
        self.age = template.horizon

    @property
    def horizon(self) -> int:
        return self.template.horizon

    def _shifted(self, plan: SafetyPlan) -> SafetyPlan:
        laws = tuple(list(plan.laws[1:]) + [self._pi_safe_law])
        ells = tuple(plan.ellipsoids[1:]) if plan.ellipsoids else tuple()
        return SafetyPlan(laws=laws, ellipsoids=ells, residuals=None,
                          feasible=False, certified=False,
                          perf_inputs=None)

    def _warm_start(self) -> SafetyPlan:
        # Shifting the all-backup initial plan just yields zero feed-forwards,
        # which is itself a sensible first guess near the safe set.
        return self._shifted(self.plan)

    def step(self, x_t, objective=None) -> StepResult:
        """One closed-loop decision: solve, adopt or shift, apply first law."""
        problem = self.template.with_state(x_t)
        if objective is not None:
            problem = problem.with_objective(objective)
        plan = self.solve_fn(problem, self._warm_start(), self.config, self.rng)
        if plan.feasible:
            self.plan = plan
            self.age = 0
        else:
            self.plan = self._shifted(self.plan)
            self.age = min(self.age + 1, self.horizon)
        u = self.plan.first_input(x_t)
        return StepResult(u=u, solved=plan.feasible, plan_age=self.age,
                          plan=self.plan)
