"""Ellipsoid set arithmetic used by the reachability and constraint machinery.

An ellipsoid is parameterized as E(p, Q) = {x | (x-p)^T Q^{-1} (x-p) <= 1}
with center p and a symmetric positive-definite shape matrix Q. All
operations here are either exact (affine images) or guaranteed
over-approximations (Minkowski sums, rectangle covers), which is what makes
them usable inside a safety argument: a true point can never leave the
returned set.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cholesky, solve_triangular

__all__ = [
    "DegenerateShapeError",
    "Ellipsoid",
    "HyperRectangle",
    "Polytope",
    "affine_transform",
    "minkowski_sum_outer",
    "max_scaled_distance",
    "rect_to_ellipsoid",
    "ellipsoid_in_polytope_residuals",
]

_SYM_RTOL = 1e-12


class DegenerateShapeError(ValueError):
    """Raised when an operation would produce a singular shape matrix."""


def _as_spd(Q: np.ndarray, what: str = "shape matrix") -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"{what} must be square, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError(f"{what} contains non-finite entries")
    scale = max(np.abs(Q).max(), 1.0)
    if np.abs(Q - Q.T).max() > _SYM_RTOL * scale:
        raise ValueError(f"{what} is not symmetric to within {_SYM_RTOL} relative")
    return 0.5 * (Q + Q.T)


class Ellipsoid:
    """Ellipsoid E(p, Q) with a cached Cholesky factor of Q.

    Membership tests and polytope residuals go through the factor; Q is
    never explicitly inverted.

    Parameters
    ----------
    center : (n,) array
    shape : (n, n) symmetric positive-definite array
    """

    __slots__ = ("center", "shape", "_chol")

    def __init__(self, center, shape):
        center = np.asarray(center, dtype=float).reshape(-1)
        shape = _as_spd(shape)
        if shape.shape[0] != center.shape[0]:
            raise ValueError("center and shape dimensions disagree")
        if not np.all(np.isfinite(center)):
            raise ValueError("center contains non-finite entries")
        try:
            chol = cholesky(shape, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DegenerateShapeError(f"shape matrix is not positive definite: {exc}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "_chol", chol)

    def __setattr__(self, name, value):
        raise AttributeError("Ellipsoid is immutable")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular L with Q = L L^T."""
        return self._chol

    def quad_form(self, x) -> np.ndarray:
        """(x-p)^T Q^{-1} (x-p), evaluated via the Cholesky factor.

        Accepts a single point (n,) or a batch (m, n); returns a scalar
        array or an (m,) array accordingly.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x) - self.center
        w = solve_triangular(self._chol, pts.T, lower=True)
        vals = np.sum(w * w, axis=0)
        return vals[0] if single else vals

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.quad_form(x) <= 1.0 + tol

    def sample_boundary(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m points uniformly mapped from the unit sphere onto the boundary."""
        u = rng.normal(size=(m, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.center + u @ self._chol.T

    def sample_interior(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m points sampled uniformly from the ellipsoid volume."""
        u = rng.normal(size=(m, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = rng.uniform(size=(m, 1)) ** (1.0 / self.dim)
        return self.center + (r * u) @ self._chol.T

    def __repr__(self):
        return f"Ellipsoid(center={self.center!r}, trace={np.trace(self.shape):.3g})"


class HyperRectangle:
    """Axis-aligned box: center a, nonnegative half-widths b."""

    __slots__ = ("center", "half_widths")

    def __init__(self, center, half_widths):
        center = np.asarray(center, dtype=float).reshape(-1)
        half_widths = np.asarray(half_widths, dtype=float).reshape(-1)
        if center.shape != half_widths.shape:
            raise ValueError("center and half_widths dimensions disagree")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(half_widths))):
            raise ValueError("non-finite rectangle data")
        if np.any(half_widths < 0):
            raise ValueError("half-widths must be nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_widths", half_widths)

    def __setattr__(self, name, value):
        raise AttributeError("HyperRectangle is immutable")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def corners(self) -> np.ndarray:
        """All 2^p corners, rows of a (2^p, p) array."""
        p = self.dim
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * p)).T.reshape(-1, p)
        return self.center + signs * self.half_widths


class Polytope:
    """Intersection of half-spaces H x <= h, one row per half-space."""

    __slots__ = ("H", "h")

    def __init__(self, H, h):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).reshape(-1)
        if H.shape[0] != h.shape[0]:
            raise ValueError("row counts of H and h disagree")
        if H.shape[0] < 1:
            raise ValueError("polytope needs at least one half-space")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("non-finite polytope data")
        if np.any(np.linalg.norm(H, axis=1) == 0.0):
            raise ValueError("zero rows in H are not allowed")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    def __setattr__(self, name, value):
        raise AttributeError("Polytope is immutable")

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def num_rows(self) -> int:
        return self.H.shape[0]

    def normalized(self) -> "Polytope":
        """Same set with every row scaled to unit norm.

        Keeps residual magnitudes comparable across constraints, which the
        penalty solver relies on.
        """
        norms = np.linalg.norm(self.H, axis=1, keepdims=True)
        return Polytope(self.H / norms, self.h / norms[:, 0])

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        vals = np.atleast_2d(x) @ self.H.T - self.h
        ok = np.all(vals <= tol, axis=1)
        return ok[0] if single else ok

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        """Axis-aligned box {x | lower <= x <= upper}."""
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        n = lower.shape[0]
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))


def affine_transform(E: Ellipsoid, A, b) -> Ellipsoid:
    """Exact image of E under x -> A x + b.

    A must have full row rank (rows <= columns) so that A Q A^T stays
    positive definite; otherwise the image is a degenerate ellipsoid and a
    DegenerateShapeError is raised. The image of E(p, Q) is E(A p + b, A Q A^T),
    which is exact, not an over-approximation.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite affine map")
    if A.shape[1] != E.dim:
        raise ValueError("map/ellipsoid dimensions disagree")
    if A.shape[0] > A.shape[1] or np.linalg.matrix_rank(A) < A.shape[0]:
        raise DegenerateShapeError(
            "affine map must have full row rank for a nondegenerate image"
        )
    AL = A @ E.chol
    return Ellipsoid(A @ E.center + b, AL @ AL.T)


def minkowski_sum_outer(E1: Ellipsoid, E2: Ellipsoid, c: float | None = None) -> Ellipsoid:
    """Ellipsoidal over-approximation of the Minkowski sum E1 (+) E2.

    Returns E(p1+p2, (1 + 1/c) Q1 + (1 + c) Q2), which contains the true
    pointwise sum for every c > 0. When c is omitted it is set to
    sqrt(tr Q1 / tr Q2), the minimizer of the trace of the result.
    """
    if E1.dim != E2.dim:
        raise ValueError("ellipsoid dimensions disagree")
    if c is None:
        t1, t2 = np.trace(E1.shape), np.trace(E2.shape)
        if t2 <= 0.0 or t1 <= 0.0:
            raise DegenerateShapeError("zero-trace operand; pass c explicitly")
        c = float(np.sqrt(t1 / t2))
    if not np.isfinite(c) or c <= 0.0:
        raise ValueError("c must be a positive real")
    Q = (1.0 + 1.0 / c) * E1.shape + (1.0 + c) * E2.shape
    return Ellipsoid(E1.center + E2.center, Q)


def max_scaled_distance(Q, S, iters: int | None = None) -> float:
    """max ||S x||_2 over x in E(0, Q).

    Equals the square root of the largest generalized eigenvalue of the
    pencil (Q, S^T S). Computed by inverse power iteration on the
    symmetric-reduced pencil with a deterministic all-ones start vector.
    `iters` defaults to n^2 sweeps; a short Rayleigh-shifted refinement runs
    afterwards so the returned value is accurate to solver tolerances
    regardless of the eigenvalue gap.
    """
    Q = _as_spd(Q)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.all(np.isfinite(S)):
        raise ValueError("S contains non-finite entries")
    if S.shape[1] != Q.shape[0]:
        raise ValueError("Q/S dimensions disagree")
    n = Q.shape[0]
    if iters is None:
        iters = n * n
    if iters < 1:
        raise ValueError("iters must be >= 1")
    L = cholesky(Q, lower=True)
    B = S @ L
    M = B.T @ B  # symmetric PSD; lambda_max(M) = r^2
    lam = _power_iteration_lambda_max(M, iters)
    return float(np.sqrt(max(lam, 0.0)))


def _is_negative_semidefinite(A: np.ndarray) -> bool:
    try:
        cholesky(-A + 1e-300 * np.eye(A.shape[0]), lower=True)
        return True
    except np.linalg.LinAlgError:
        return False


def _power_iteration_lambda_max(M: np.ndarray, iters: int) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Power iteration from the normalized all-ones vector for `iters` sweeps,
    then a short Rayleigh-shift polish. The result is then certified with a
    definiteness test of M - lambda I; if the iteration locked onto a
    non-dominant eigenvalue (possible for near-degenerate spectra), a
    bisection on certified upper bounds recovers lambda_max. The returned
    value therefore never undershoots, which the containment guarantees
    rely on.
    """
    n = M.shape[0]
    v = np.ones(n) / np.sqrt(n)
    lam = float(v @ M @ v)
    for _ in range(iters):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = float(v @ M @ v)
    eye = np.eye(n)
    for _ in range(3):
        shift = lam * (1.0 + 1e-10) + 1e-300
        try:
            w = np.linalg.solve(M - shift * eye, v)
        except np.linalg.LinAlgError:
            break
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0.0:
            break
        v_new = w / nw
        lam_new = float(v_new @ M @ v_new)
        if not np.isfinite(lam_new):
            break
        v, lam = v_new, max(lam, lam_new)
    hi = lam * (1.0 + 1e-9) + 1e-300
    if _is_negative_semidefinite(M - hi * eye):
        return lam
    # certified bisection between the (too small) estimate and trace(M)
    lo, hi = lam, float(np.trace(M)) + 1e-300
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _is_negative_semidefinite(M - mid * eye):
            hi = mid
        else:
            lo = mid
    return hi


def rect_to_ellipsoid(R: HyperRectangle, eps_q: float = 1e-9) -> Ellipsoid:
    """Smallest axis-aligned ellipsoid with semi-axes sqrt(p) * b covering R.

    The cover E(a, p * diag(b)^2) contains every corner of the rectangle
    (corners land exactly on the boundary). Half-widths below `eps_q` are
    inflated to it so the shape matrix stays positive definite.
    """
    p = R.dim
    b = np.maximum(R.half_widths, eps_q)
    return Ellipsoid(R.center, p * np.diag(b * b))


def ellipsoid_in_polytope_residuals(E: Ellipsoid, P: Polytope) -> np.ndarray:
    """Signed containment residuals of E in P, one per half-space.

    Component i is H_i p + sqrt(H_i Q H_i^T) - h_i; E is contained in P
    iff every component is <= 0. The quadratic terms use the cached
    Cholesky factor of Q.
    """
    if E.dim != P.dim:
        raise ValueError("ellipsoid/polytope dimensions disagree")
    HL = P.H @ E.chol
    spread = np.linalg.norm(HL, axis=1)
    return P.H @ E.center + spread - P.h
