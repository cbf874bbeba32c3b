"""Stochastic performance trajectories and task objectives.

While the safety tube robustly over-approximates everything the system
could do, the performance side works with a cheap Gaussian belief over what
the system will probably do: first-order moment matching through the
prior-plus-GP-mean dynamics. Stage costs over those beliefs (closed-form
expected saturating cost, predictive-variance exploration bonuses) form the
objectives handed to the MPC solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import GPPosterior

__all__ = [
    "GaussianBelief",
    "PerformanceObjective",
    "moment_propagate",
    "propagate_beliefs",
    "expected_saturating_cost",
    "discounted_expected_cost",
    "exploration_objective",
    "assemble_coupled_problem",
    "toy_system_best_safe",
    "toy_system_two_stage",
]


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian state belief N(mean, cov); cov is clipped to the PSD cone."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("mean/cov dimensions disagree")
        cov = 0.5 * (cov + cov.T)
        evals, evecs = np.linalg.eigh(cov)
        if np.min(evals) < -1e-10:
            raise ValueError(f"covariance has eigenvalue {np.min(evals):.3e} < -1e-10")
        if np.min(evals) < 0.0:
            cov = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def point(cls, x) -> "GaussianBelief":
        x = np.asarray(x, dtype=float).reshape(-1)
        return cls(x, np.zeros((x.shape[0], x.shape[0])))


@dataclass(frozen=True)
class PerformanceObjective:
    """Declarative objective for the planner.

    kind: 'expected_saturating_cost', 'variance_sum',
    'confidence_minus_deviation' or 'center_tracking'. W weights the
    saturating / tracking quadratic, Q_perf penalizes performance-mean
    deviation from the safety tube, gamma is the discount, goal the target
    state.
    """

    kind: str
    goal: np.ndarray | None = None
    W: np.ndarray | None = None
    Q_perf: np.ndarray | None = None
    gamma: float = 0.95

    def __post_init__(self):
        kinds = ("expected_saturating_cost", "variance_sum",
                 "confidence_minus_deviation", "center_tracking")
        if self.kind not in kinds:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("W", "Q_perf"):
            M = getattr(self, name)
            if M is not None:
                M = np.atleast_2d(np.asarray(M, dtype=float))
                if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                    raise ValueError(f"{name} must be positive semidefinite")
                object.__setattr__(self, name, M)
        if self.goal is not None:
            object.__setattr__(self, "goal",
                               np.asarray(self.goal, dtype=float).reshape(-1))


def moment_propagate(belief: GaussianBelief, u, gp: GPPosterior, prior) -> GaussianBelief:
    """One first-order moment-matching step of the belief.

    m' = h(m, u) + mu(m, u);  S' = J S J^T + diag(sigma^2(m, u)),
    with J the state Jacobian of h + mu at (m, u).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    p = belief.dim
    z = np.concatenate([belief.mean, u])
    mu, sigma = gp.predict(z)
    h_val = np.asarray(prior.h(belief.mean, u), dtype=float).reshape(-1)
    A_h, _ = prior.jacobian(belief.mean, u)
    dmu, _ = gp.predict_jacobians(z)
    J = np.atleast_2d(np.asarray(A_h, dtype=float)) + dmu[:, :p]
    mean_next = h_val + mu
    cov_next = J @ belief.cov @ J.T + np.diag(sigma ** 2)
    return GaussianBelief(mean_next, cov_next)


def propagate_beliefs(x0, inputs, gp: GPPosterior, prior) -> list[GaussianBelief]:
    """Belief chain X_0..X_H from a deterministic start under an input sequence."""
    beliefs = [GaussianBelief.point(x0)]
    for u in np.atleast_2d(np.asarray(inputs, dtype=float)):
        beliefs.append(moment_propagate(beliefs[-1], u, gp, prior))
    return beliefs


def expected_saturating_cost(belief: GaussianBelief, x_g, W) -> float:
    """Closed-form E[1 - exp(-0.5 (x - x_g)^T W (x - x_g))] under the belief.

    For x ~ N(m, S) the expectation of the exponential is
    det(I + S W)^{-1/2} exp(-0.5 d^T W (I + S W)^{-1} d) with d = m - x_g.
    """
    x_g = np.asarray(x_g, dtype=float).reshape(-1)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    A = np.eye(belief.dim) + belief.cov @ W
    det = np.linalg.det(A)
    if not np.isfinite(det) or det <= 1e-12:
        raise ValueError("I + S W is (near-)singular")
    d = belief.mean - x_g
    quad = d @ W @ np.linalg.solve(A, d)
    return float(1.0 - np.exp(-0.5 * quad) / np.sqrt(det))


def discounted_expected_cost(beliefs: list[GaussianBelief], x_g, W, gamma: float,
                             horizon: int | None = None) -> float:
    """sum_{t < H} gamma^t * expected saturating stage cost over X_t."""
    H = len(beliefs) - 1 if horizon is None else horizon
    total = 0.0
    for t in range(H):
        total += gamma ** t * expected_saturating_cost(beliefs[t], x_g, W)
    return total


def exploration_objective(kind: str, gp: GPPosterior, Q_perf=None):
    """Exploration objectives as plain callables (to be minimized).

    'variance_sum' -> f(x0, u0) = -sum_j sigma_j(x0, u0): used in static
    exploration where the initial state is a decision variable too.

    'confidence_minus_deviation' -> f(beliefs, centers) =
    -(sum_t tr(S_t^{1/2}) - sum_{t>=1} (m_t - p_t)^T Q_perf (m_t - p_t)):
    the dynamic-exploration objective coupling the performance chain to the
    safety tube.
    """
    if kind == "variance_sum":
        def objective(x0, u0):
            z = np.concatenate([np.asarray(x0, dtype=float).reshape(-1),
                                np.atleast_1d(np.asarray(u0, dtype=float))])
            _, sigma = gp.predict(z)
            return -float(np.sum(sigma))
        return objective
    if kind == "confidence_minus_deviation":
        Qp = np.atleast_2d(np.asarray(Q_perf, dtype=float))

        def objective(beliefs, centers):
            gain = 0.0
            for b in beliefs:
                evals = np.linalg.eigvalsh(b.cov)
                gain += np.sum(np.sqrt(np.maximum(evals, 0.0)))
            dev = 0.0
            m_end = min(len(centers), len(beliefs)) - 1
            for t in range(1, m_end + 1):
                diff = beliefs[t].mean - centers[t]
                dev += diff @ Qp @ diff
            return -(gain - dev)
        return objective
    raise ValueError(f"unsupported exploration objective {kind!r}")


def assemble_coupled_problem(mpc, horizon: int, coupling: int,
                             objective: PerformanceObjective):
    """Attach a performance trajectory of length `horizon` to a safety MPC
    problem, sharing the first `coupling` inputs between both plans.

    horizon == 0 degenerates to the plain safety problem with the objective
    evaluated on the tube centers.
    """
    from .controller import PerformanceSpec  # deferred: controller imports us

    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0:
        if objective.kind != "center_tracking":
            objective = PerformanceObjective(
                kind="center_tracking", goal=objective.goal, W=objective.W,
                gamma=objective.gamma)
        return mpc.with_objective(objective, perf=None)
    if not (1 <= coupling <= min(mpc.horizon, horizon)):
        raise ValueError("coupling length r must satisfy 1 <= r <= min(T, H)")
    return mpc.with_objective(
        objective, perf=PerformanceSpec(horizon=horizon, coupling=coupling))


# ---------------------------------------------------------------------------
# Integer toy system: one state, three actions, the canonical example of why
# decoupled "plan performance, then track it safely" gets stuck.

def _toy_cost(x: int) -> float:
    if x == -1:
        return -2.0
    if x == 1:
        return -1.0
    return 0.0


def _toy_best_sequence(x0: int, horizon: int, safe: bool) -> int:
    """First action of the best action sequence by exhaustive enumeration.

    With safe=True only sequences keeping the state in N = {0, 1, 2, ...}
    are admissible. Ties prefer staying (u=0), mirroring a minimum-distance
    tracking rule.
    """
    best_u, best_cost = 0, np.inf
    def recurse(x, t):
        if t == horizon:
            return 0.0
        best = np.inf
        for u in (-1, 0, 1):
            nxt = x + u
            if safe and nxt < 0:
                continue
            best = min(best, _toy_cost(nxt) + recurse(nxt, t + 1))
        return best
    for u in (0, -1, 1):  # tie-break order: stay first
        nxt = x0 + u
        if safe and nxt < 0:
            continue
        cost = _toy_cost(nxt) + recurse(nxt, 1)
        if cost < best_cost - 1e-12:
            best_cost, best_u = cost, u
    return best_u


def toy_system_two_stage(x0: int = 0, horizon: int = 3, n_steps: int = 10) -> list[int]:
    """Decoupled scheme: plan the unconstrained optimum, then apply the
    admissible action closest to it. Returns the visited states."""
    xs = [x0]
    for _ in range(n_steps):
        u_perf = _toy_best_sequence(xs[-1], horizon, safe=False)
        candidates = [u for u in (-1, 0, 1) if xs[-1] + u >= 0]
        u = min(candidates, key=lambda u: (abs(u - u_perf), abs(u)))
        xs.append(xs[-1] + u)
    return xs


def toy_system_best_safe(x0: int = 0, horizon: int = 3, n_steps: int = 10) -> list[int]:
    """Coupled scheme: optimize performance subject to admissibility.
    Returns the visited states."""
    xs = [x0]
    for _ in range(n_steps):
        u = _toy_best_sequence(xs[-1], horizon, safe=True)
        xs.append(xs[-1] + u)
    return xs
