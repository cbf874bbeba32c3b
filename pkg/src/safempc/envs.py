"""Benchmark systems: inverted pendulum and cart-pole.

Provides the ground-truth dynamics (RK4 on the continuous equations of
motion), deliberately wrong affine prior models (linearization with
perturbed parameters), LQR synthesis on the true linearization, and the
construction of a polytopic terminal safe set as an inner approximation of
the backup controller's region of attraction.

The pendulum state is (angle, angular velocity) with the origin upright.
The cart-pole state is (cart position, pole angle, cart velocity, angular
velocity), origin = cart at rest with the pole upright. Angles are radians
internally; degrees appear only at the config surface.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .ellipsoids import Polytope
from .reachability import AffinePrior

__all__ = [
    "PendulumParams",
    "CartPoleParams",
    "EnvSpec",
    "pendulum_ode",
    "cartpole_ode",
    "pendulum_step",
    "cartpole_step",
    "rk4_step",
    "linearize_discretize",
    "lqr_synthesize",
    "build_safe_set",
    "build_safe_set_product",
    "make_pendulum",
    "make_cartpole",
]


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 0.15           # kg
    length: float = 0.5          # m
    friction: float = 0.1        # N m s / rad
    gravity: float = 9.81        # m / s^2
    u_max: float = 1.0           # N m

    def __post_init__(self):
        if min(self.mass, self.length, self.friction, self.gravity, self.u_max) <= 0:
            raise ValueError("pendulum parameters must be positive")


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 0.5       # kg
    pole_mass: float = 0.5       # kg
    pole_length: float = 0.5     # m
    friction: float = 0.1
    gravity: float = 9.81
    rail_min: float = -10.0
    rail_max: float = 3.0
    angle_max_deg: float = 90.0
    u_max: float = 5.0
    start_position: float = -2.0
    goal_position: float = 2.6

    def __post_init__(self):
        if self.rail_min >= self.rail_max:
            raise ValueError("rail bounds out of order")
        if self.angle_max_deg <= 0 or self.u_max <= 0:
            raise ValueError("bounds must be positive")

    @property
    def angle_max(self) -> float:
        return np.deg2rad(self.angle_max_deg)


def pendulum_ode(x, u, params: PendulumParams) -> np.ndarray:
    """Continuous dynamics: m l^2 ddtheta = g m l sin(theta) - eta dtheta + u.

    Broadcasts over leading axes of x (state in the last axis) for batched
    Monte-Carlo rollouts.
    """
    x = np.asarray(x, dtype=float)
    theta, omega = x[..., 0], x[..., 1]
    ml2 = params.mass * params.length ** 2
    acc = (params.gravity / params.length) * np.sin(theta) \
        - params.friction / ml2 * omega + np.asarray(u) / ml2
    return np.stack([omega, acc], axis=-1)


def _pendulum_jac(x, u, params: PendulumParams):
    theta = x[0]
    ml2 = params.mass * params.length ** 2
    A = np.array([
        [0.0, 1.0],
        [(params.gravity / params.length) * np.cos(theta), -params.friction / ml2],
    ])
    B = np.array([[0.0], [1.0 / ml2]])
    return A, B


def cartpole_ode(x, u, params: CartPoleParams) -> np.ndarray:
    """Continuous cart-pole dynamics from the coupled equations of motion.

    (M+m) xdd - m l thdd cos(th) + m l thd^2 sin(th) = u - eta xd
    m l thdd - m xdd cos(th) - m g sin(th) = 0

    The push force and rail friction act on the cart coordinate; the pole
    is unactuated (which is what makes the balancing task underactuated).
    The 2x2 mass matrix is inverted in closed form (its determinant
    m l (M + m sin^2) is bounded away from zero); broadcasts over leading
    axes of x.
    """
    x = np.asarray(x, dtype=float)
    theta, v, omega = x[..., 1], x[..., 2], x[..., 3]
    M, m = params.cart_mass, params.pole_mass
    length, g, eta = params.pole_length, params.gravity, params.friction
    sin, cos = np.sin(theta), np.cos(theta)
    a = M + m
    b = -m * length * cos
    c = -m * cos
    d = m * length
    det = a * d - b * c
    r0 = -m * length * omega ** 2 * sin + np.asarray(u) - eta * v
    r1 = m * g * sin
    acc0 = (d * r0 - b * r1) / det
    acc1 = (-c * r0 + a * r1) / det
    return np.stack([v, omega, acc0, acc1], axis=-1)


def _cartpole_jac(x, u, params: CartPoleParams):
    _, theta, v, omega = x
    M, m = params.cart_mass, params.pole_mass
    length, g, eta = params.pole_length, params.gravity, params.friction
    sin, cos = np.sin(theta), np.cos(theta)
    mass = np.array([[M + m, -m * length * cos],
                     [-m * cos, m * length]])
    rhs = np.array([-m * length * omega ** 2 * sin + u - eta * v,
                    m * g * sin])
    acc = np.linalg.solve(mass, rhs)
    dmass_dth = np.array([[0.0, m * length * sin],
                          [m * sin, 0.0]])
    drhs = {
        "theta": np.array([-m * length * omega ** 2 * cos, m * g * cos]),
        "v": np.array([-eta, 0.0]),
        "omega": np.array([-2.0 * m * length * omega * sin, 0.0]),
        "u": np.array([1.0, 0.0]),
    }
    dacc_dth = np.linalg.solve(mass, drhs["theta"] - dmass_dth @ acc)
    dacc_dv = np.linalg.solve(mass, drhs["v"])
    dacc_dom = np.linalg.solve(mass, drhs["omega"])
    dacc_du = np.linalg.solve(mass, drhs["u"])
    A = np.zeros((4, 4))
    A[0, 2] = 1.0
    A[1, 3] = 1.0
    A[2:, 1] = dacc_dth
    A[2:, 2] = dacc_dv
    A[2:, 3] = dacc_dom
    B = np.zeros((4, 1))
    B[2:, 0] = dacc_du
    return A, B


def rk4_step(ode, x, u, dt: float, substeps: int = 1) -> np.ndarray:
    """Classic RK4 with the control held constant over dt."""
    x = np.asarray(x, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        k1 = ode(x, u)
        k2 = ode(x + 0.5 * h * k1, u)
        k3 = ode(x + 0.5 * h * k2, u)
        k4 = ode(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def pendulum_step(x, u, params: PendulumParams, dt: float, substeps: int = 10) -> np.ndarray:
    """One discrete transition; the input saturates at +-u_max."""
    u = float(np.clip(np.asarray(u, dtype=float).reshape(-1)[0], -params.u_max, params.u_max))
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    return rk4_step(lambda s, a: pendulum_ode(s, a, params), x, u, dt, substeps)


def cartpole_step(x, u, params: CartPoleParams, dt: float, substeps: int = 10) -> np.ndarray:
    """One discrete transition; the input saturates at +-u_max."""
    u = float(np.clip(np.asarray(u, dtype=float).reshape(-1)[0], -params.u_max, params.u_max))
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    return rk4_step(lambda s, a: cartpole_ode(s, a, params), x, u, dt, substeps)


def finite_difference_jacobian(ode, x, u, eps: float = 1e-6):
    """Central-difference Jacobians of a continuous-time ode at (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    p, q = x.shape[0], u.shape[0]
    A = np.zeros((p, p))
    B = np.zeros((p, q))
    for i in range(p):
        dx = np.zeros(p)
        dx[i] = eps
        A[:, i] = (ode(x + dx, float(u[0])) - ode(x - dx, float(u[0]))) / (2 * eps)
    for i in range(q):
        B[:, i] = (ode(x, float(u[i] + eps)) - ode(x, float(u[i] - eps))) / (2 * eps)
    return A, B


def linearize_discretize(ode, x_eq, u_eq, dt: float, jac=None):
    """Discrete (A, B) of the ode linearized at an equilibrium.

    Uses the analytic continuous Jacobian when `jac` is given, otherwise
    central finite differences, then zero-order-hold discretization via the
    matrix exponential.
    """
    x_eq = np.asarray(x_eq, dtype=float)
    u_eq = np.atleast_1d(np.asarray(u_eq, dtype=float))
    if jac is not None:
        A_c, B_c = jac(x_eq, float(u_eq[0]))
    else:
        A_c, B_c = finite_difference_jacobian(ode, x_eq, u_eq)
    p, q = A_c.shape[0], B_c.shape[1]
    M = np.zeros((p + q, p + q))
    M[:p, :p] = A_c
    M[:p, p:] = B_c
    Phi = expm(M * dt)
    return Phi[:p, :p], Phi[:p, p:]


def lqr_synthesize(A, B, Q, R, tol: float = 1e-12, max_iter: int = 200_000):
    """Infinite-horizon discrete LQR via fixed-point Riccati iteration.

    Returns (K, P) with the stabilizing convention u = -K x. Iterates
    P <- Q + A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A until the update
    is below tol; raises on non-convergence.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Riccati iteration did not converge")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    return K, P


def riccati_residual(P, A, B, Q, R) -> float:
    """Max-abs defect of P in the discrete algebraic Riccati equation."""
    BtP = B.T @ P
    gain = np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(Q + A.T @ P @ A - A.T @ P @ B @ gain - P)))


def _level_set_polytope(P, c: float, scale: float) -> Polytope:
    """Tangent cuts of {x^T P x <= scale^2 c} in the level-set metric.

    Directions are the unit-ball axes plus both adjacent-pair diagonal
    families, mapped through the level-set geometry. Cutting in the
    ellipsoid metric (rather than raw state axes) keeps the polytope
    vertices within a bounded factor of the cut radius even when P is
    badly conditioned, so the containment check below terminates with a
    usefully large set.
    """
    p = P.shape[0]
    Q_shape = np.linalg.inv(P) * c
    L = np.linalg.cholesky(Q_shape)  # x = L y maps unit ball -> level set
    dirs = []
    for i in range(p):
        e = np.zeros(p)
        e[i] = 1.0
        dirs.extend([e, -e])
    for i in range(p):
        for sign in (1.0, -1.0):
            d = np.zeros(p)
            d[i] = 1.0
            d[(i + 1) % p] = sign
            d /= np.linalg.norm(d)
            dirs.extend([d, -d])
    W = np.unique(np.round(np.array(dirs), 12), axis=0)
    H = np.linalg.solve(L, np.eye(p)).T @ W.T  # rows w^T L^{-1}
    H = H.T
    h = np.full(W.shape[0], scale)
    return Polytope(H, h)


def _polytope_bounding_box(poly: Polytope) -> np.ndarray:
    """Per-axis (lo, hi) bounds of a bounded polytope, via LPs."""
    from scipy.optimize import linprog

    p = poly.dim
    box = np.empty((p, 2))
    for i in range(p):
        e = np.zeros(p)
        e[i] = 1.0
        lo = linprog(e, A_ub=poly.H, b_ub=poly.h, bounds=[(None, None)] * p,
                     method="highs")
        hi = linprog(-e, A_ub=poly.H, b_ub=poly.h, bounds=[(None, None)] * p,
                     method="highs")
        if not (lo.success and hi.success):
            raise RuntimeError("polytope bounding box LP failed (unbounded set?)")
        box[i] = (lo.fun, -hi.fun)
    return box


def _polytope_vertices(poly: Polytope) -> np.ndarray:
    """Vertex enumeration by active-set combinations (small dimensions only)."""
    H, h = poly.H, poly.h
    m, p = H.shape
    verts = []
    for rows in itertools.combinations(range(m), p):
        sub = H[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        v = np.linalg.solve(sub, h[list(rows)])
        if np.all(H @ v <= h + 1e-9):
            verts.append(v)
    if not verts:
        raise RuntimeError("vertex enumeration found no vertices")
    return np.unique(np.round(np.array(verts), 12), axis=0)


def build_safe_set(K, P, closed_loop_step, u_max: float, budget: float,
                   state_poly: Polytope | None = None,
                   n_boundary: int = 60, n_check_steps: int = 100,
                   scale: float = 0.9, seed: int = 0,
                   bisect_iters: int = 40):
    """Terminal safe set: polytopic inner approximation of the attraction
    region of the backup controller.

    Bisection finds the largest level c <= budget such that sampled boundary
    points of {x^T P x = c} have admissible backup inputs (||K x||_inf <=
    u_max), satisfy the state constraints, and never leave the level set
    over `n_check_steps` simulated steps of the true closed loop (inputs
    saturated). The returned polytope is cut from tangent half-spaces of the
    level set shrunk by `scale`, and its vertices are verified (and the
    scale reduced if needed) to lie inside the level set.

    closed_loop_step(X) must advance a batch of states (rows of X) one step
    under the backup policy with saturated inputs.

    Returns (polytope, c).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    p = P.shape[0]
    rng = np.random.default_rng(seed)
    u_sphere = rng.normal(size=(n_boundary, p))
    u_sphere /= np.linalg.norm(u_sphere, axis=1, keepdims=True)
    L = np.linalg.cholesky(P)

    def boundary_points(c):
        # x with x^T P x = c: x = sqrt(c) L^{-T} u
        return np.sqrt(c) * np.linalg.solve(L.T, u_sphere.T).T

    def feasible(c):
        pts = boundary_points(c)
        if np.any(np.abs(pts @ K.T) > u_max):
            return False
        if state_poly is not None and not np.all(state_poly.contains(pts)):
            return False
        cur = pts
        for _ in range(n_check_steps):
            cur = closed_loop_step(cur)
            if np.any(np.einsum("ij,jk,ik->i", cur, P, cur) > c * (1.0 + 1e-9)):
                return False
            if state_poly is not None and not np.all(state_poly.contains(cur)):
                return False
        return True

    if feasible(budget):
        c = budget
    else:
        lo = budget * 1e-6
        if not feasible(lo):
            raise RuntimeError("no invariant level set found down to budget * 1e-6")
        hi = budget
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        c = lo

    s = scale
    for _ in range(50):
        poly = _level_set_polytope(P, c, s)
        verts = _polytope_vertices(poly)
        if np.all(np.einsum("ij,jk,ik->i", verts, P, verts) <= c * (1 + 1e-9)):
            return poly, c
        s *= 0.95
    raise RuntimeError("could not inscribe the safe-set polytope in the level set")


def build_safe_set_product(K, P, closed_loop_step, u_max: float, budget: float,
                           state_poly: Polytope, slab_axis: int = 0,
                           n_boundary: int = 60, n_check_steps: int = 300,
                           scale: float = 0.9, seed: int = 0,
                           bisect_iters: int = 28,
                           converge_tol: float = 0.2):
    """Safe set as a position slab times a reduced-coordinate level set.

    For systems whose dynamics are translation invariant along one
    coordinate (the cart position), a level set of the full Riccati matrix
    is needlessly small along that coordinate: the backup controller can
    recover from anywhere on the rail as long as the remaining coordinates
    are well-behaved. This builds
        {x : lo <= x_slab <= hi} x {x_red^T P_red x_red <= c}
    with P_red the Riccati matrix restricted to the non-slab coordinates.

    The admissibility gate here is the relaxed terminal-set assumption:
    closed-loop rollouts from the set must respect the state constraints
    and converge toward the origin (the set itself need not be invariant),
    and the unsaturated backup input must be admissible on the set. Slab
    margins are bisected first (transients overshoot outward before the
    controller turns the state around), then the reduced level.

    Returns (polytope, c_red, (lo, hi)).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    p = P.shape[0]
    red_idx = [i for i in range(p) if i != slab_axis]
    P_red = P[np.ix_(red_idx, red_idx)]
    L_red = np.linalg.cholesky(P_red)
    K_slab = float(np.abs(K[0, slab_axis]))
    K_red = K[0, red_idx]
    rng = np.random.default_rng(seed)
    u_sphere = rng.normal(size=(n_boundary, p - 1))
    u_sphere /= np.linalg.norm(u_sphere, axis=1, keepdims=True)

    # outermost admissible slab coordinate per side, from the state polytope
    rail_lo, rail_hi = -np.inf, np.inf
    for row, offset in zip(state_poly.H, state_poly.h):
        if abs(row[slab_axis]) > 1e-12 and np.all(np.abs(np.delete(row, slab_axis)) < 1e-12):
            bound = offset / row[slab_axis]
            if row[slab_axis] > 0:
                rail_hi = min(rail_hi, bound)
            else:
                rail_lo = max(rail_lo, bound)
    if not (np.isfinite(rail_lo) and np.isfinite(rail_hi)):
        raise RuntimeError("slab axis is unconstrained; use build_safe_set instead")

    def admissible(lo, hi, c_red):
        u_sup = K_slab * max(abs(lo), abs(hi)) \
            + np.sqrt(c_red * K_red @ np.linalg.solve(P_red, K_red))
        if u_sup > u_max:
            return False
        red = np.sqrt(c_red) * np.linalg.solve(L_red.T, u_sphere.T).T
        red = np.vstack([red, np.zeros((1, p - 1))])
        pts = []
        for pos in np.linspace(lo, hi, 9):
            X = np.zeros((red.shape[0], p))
            X[:, slab_axis] = pos
            X[:, red_idx] = red
            pts.append(X)
        cur = np.vstack(pts)
        if not np.all(state_poly.contains(cur, tol=1e-12)):
            return False
        final = None
        for _ in range(n_check_steps):
            cur = closed_loop_step(cur)
            if not np.all(state_poly.contains(cur)):
                return False
            final = cur
        return bool(np.max(np.abs(final[:, slab_axis])) < converge_tol)

    c_seed = budget * 1e-6

    def bisect_margin(extreme):
        # largest one-sided extension with a near-degenerate reduced set
        def ok(v):
            lo, hi = (v, 0.0) if extreme < 0 else (0.0, v)
            return admissible(lo, hi, c_seed)

        if ok(extreme):
            return extreme
        good, bad = 0.0, extreme
        for _ in range(bisect_iters):
            mid = 0.5 * (good + bad)
            if ok(mid):
                good = mid
            else:
                bad = mid
        return good

    slab_lo = bisect_margin(rail_lo)
    slab_hi = bisect_margin(rail_hi)
    # breathing room so the joint set stays admissible with the reduced part
    slab_lo *= 0.97
    slab_hi *= 0.97

    if admissible(slab_lo, slab_hi, budget):
        c = budget
    else:
        lo_c, hi_c = c_seed, budget
        if not admissible(slab_lo, slab_hi, lo_c):
            raise RuntimeError("no admissible reduced level found")
        for _ in range(bisect_iters):
            mid = np.sqrt(lo_c * hi_c)
            if admissible(slab_lo, slab_hi, mid):
                lo_c = mid
            else:
                hi_c = mid
        c = lo_c

    s = scale
    for _ in range(50):
        red_poly = _level_set_polytope(P_red, c, s)
        rows = red_poly.H.shape[0]
        H = np.zeros((rows + 2, p))
        H[:rows][:, red_idx] = red_poly.H
        H[rows, slab_axis] = 1.0
        H[rows + 1, slab_axis] = -1.0
        h = np.concatenate([red_poly.h, [scale * slab_hi, -scale * slab_lo]])
        poly = Polytope(H, h)
        verts = _polytope_vertices(poly)
        red_quad = np.einsum("ij,jk,ik->i", verts[:, red_idx], P_red, verts[:, red_idx])
        if np.all(red_quad <= c * (1 + 1e-9)):
            return poly, c, (slab_lo, slab_hi)
        s *= 0.95
    raise RuntimeError("could not inscribe the product safe-set polytope")


@dataclass(frozen=True)
class EnvSpec:
    """Everything the planner and the experiment drivers need to know about
    one concrete system."""

    name: str
    params: object
    dt: float
    substeps: int
    state_dim: int
    control_dim: int
    prior: AffinePrior
    state_poly: Polytope | None
    control_poly: Polytope
    safe_poly: Polytope
    lqr_gain: np.ndarray           # u = -lqr_gain @ x
    lqr_value: np.ndarray          # Riccati P of the true linearization
    safe_level: float
    obs_noise_std: float
    goal: np.ndarray
    start: np.ndarray

    def true_step(self, x, u) -> np.ndarray:
        if self.name == "pendulum":
            return pendulum_step(x, u, self.params, self.dt, self.substeps)
        return cartpole_step(x, u, self.params, self.dt, self.substeps)

    def ode(self, x, u) -> np.ndarray:
        if self.name == "pendulum":
            return pendulum_ode(x, u, self.params)
        return cartpole_ode(x, u, self.params)

    def pi_safe(self, x) -> np.ndarray:
        u = -self.lqr_gain @ np.asarray(x, dtype=float)
        return np.clip(u, -self.params.u_max, self.params.u_max)

    def rollout_pi_safe(self, X0, n_steps: int) -> np.ndarray:
        """Batch closed-loop simulation under the saturated backup policy.

        X0 is (m, p); returns the trajectory (n_steps + 1, m, p).
        """
        X = np.atleast_2d(np.asarray(X0, dtype=float))
        out = np.empty((n_steps + 1,) + X.shape)
        out[0] = X
        for t in range(n_steps):
            U = np.clip(-X @ self.lqr_gain.T, -self.params.u_max,
                        self.params.u_max)[..., 0]
            X = rk4_step(self.ode, X, U, self.dt, self.substeps)
            out[t + 1] = X
        return out

    def model_error(self, x, u) -> np.ndarray:
        """g(x, u) = true transition minus prior prediction."""
        return self.true_step(x, u) - self.prior.h(x, np.atleast_1d(u))

    def sample_safe_states(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform rejection sampling inside the terminal polytope, proposals
        drawn from its axis-aligned bounding box."""
        box = _polytope_bounding_box(self.safe_poly)
        out = np.empty((m, self.state_dim))
        got = 0
        while got < m:
            pts = rng.uniform(box[:, 0], box[:, 1], size=(4 * m, self.state_dim))
            keep = pts[self.safe_poly.contains(pts)]
            take = min(m - got, keep.shape[0])
            out[got:got + take] = keep[:take]
            got += take
        return out


def make_pendulum(dt: float = 0.05, substeps: int = 10,
                  prior_mass: float = 0.10, prior_friction: float = 0.0,
                  lqr_q=(1.0, 2.0), lqr_r: float = 20.0,
                  obs_noise_std: float = 1e-3,
                  safe_set_budget: float = 5.0, seed: int = 0) -> EnvSpec:
    """Inverted pendulum with an optimistic prior (lighter, frictionless)."""
    params = PendulumParams()
    wrong = replace(params, mass=prior_mass,
                    friction=prior_friction if prior_friction > 0 else 1e-12)
    x_eq, u_eq = np.zeros(2), np.zeros(1)
    A_p, B_p = linearize_discretize(
        lambda x, u: pendulum_ode(x, u, wrong), x_eq, u_eq, dt,
        jac=lambda x, u: _pendulum_jac(x, u, wrong))
    A_t, B_t = linearize_discretize(
        lambda x, u: pendulum_ode(x, u, params), x_eq, u_eq, dt,
        jac=lambda x, u: _pendulum_jac(x, u, params))
    K, P = lqr_synthesize(A_t, B_t, np.diag(lqr_q), np.array([[lqr_r]]))

    def step(X):
        U = np.clip(-X @ K.T, -params.u_max, params.u_max)[..., 0]
        return rk4_step(lambda s, a: pendulum_ode(s, a, params), X, U, dt, substeps)

    safe_poly, c = build_safe_set(K, P, step, params.u_max, safe_set_budget,
                                  state_poly=None, seed=seed)
    control_poly = Polytope.box([-params.u_max], [params.u_max])
    return EnvSpec(
        name="pendulum", params=params, dt=dt, substeps=substeps,
        state_dim=2, control_dim=1,
        prior=AffinePrior(A_p, B_p),
        state_poly=None, control_poly=control_poly, safe_poly=safe_poly,
        lqr_gain=K, lqr_value=P, safe_level=c,
        obs_noise_std=obs_noise_std,
        goal=np.zeros(2), start=np.zeros(2),
    )


def make_cartpole(dt: float = 0.05, substeps: int = 10,
                  prior_pole_mass: float = 0.4, prior_friction: float = 0.0,
                  lqr_q=(4.0, 8.0, 12.0, 2.0), lqr_r: float = 40.0,
                  obs_noise_std: float = 1e-3,
                  safe_set_budget: float = 20.0, seed: int = 0) -> EnvSpec:
    """Cart-pole on a rail with a floor constraint on the pole angle."""
    params = CartPoleParams()
    wrong = replace(params, pole_mass=prior_pole_mass,
                    friction=prior_friction if prior_friction > 0 else 1e-12)
    x_eq, u_eq = np.zeros(4), np.zeros(1)
    A_p, B_p = linearize_discretize(
        lambda x, u: cartpole_ode(x, u, wrong), x_eq, u_eq, dt,
        jac=lambda x, u: _cartpole_jac(x, u, wrong))
    A_t, B_t = linearize_discretize(
        lambda x, u: cartpole_ode(x, u, params), x_eq, u_eq, dt,
        jac=lambda x, u: _cartpole_jac(x, u, params))
    K, P = lqr_synthesize(A_t, B_t, np.diag(lqr_q), np.array([[lqr_r]]))
    # state constraints: rail and angle limits (velocities unconstrained)
    H = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
    ])
    h = np.array([params.rail_max, -params.rail_min,
                  params.angle_max, params.angle_max])
    state_poly = Polytope(H, h)

    def step(X):
        U = np.clip(-X @ K.T, -params.u_max, params.u_max)[..., 0]
        return rk4_step(lambda s, a: cartpole_ode(s, a, params), X, U, dt, substeps)

    # the cart coordinate is translation invariant: use the slab construction
    safe_poly, c, _slab = build_safe_set_product(
        K, P, step, params.u_max, safe_set_budget, state_poly,
        slab_axis=0, seed=seed)
    control_poly = Polytope.box([-params.u_max], [params.u_max])
    return EnvSpec(
        name="cartpole", params=params, dt=dt, substeps=substeps,
        state_dim=4, control_dim=1,
        prior=AffinePrior(A_p, B_p),
        state_poly=state_poly, control_poly=control_poly, safe_poly=safe_poly,
        lqr_gain=K, lqr_value=P, safe_level=c,
        obs_noise_std=obs_noise_std,
        goal=np.array([params.goal_position, 0.0, 0.0, 0.0]),
        start=np.array([params.start_position, 0.0, 0.0, 0.0]),
    )
