"""Reliable one-step and multi-step ellipsoidal reachability.

Given an ellipsoid of current states, an affine feedback law and calibrated
GP confidence intervals on the model error, these routines produce an
ellipsoid guaranteed (at the confidence level of the intervals) to contain
the true next state. Two variants are provided: a locally constant
approximation of the model error, and a first-order linearization of the
GP mean that trades Lipschitz constants of the unknown error for Lipschitz
constants of known posterior quantities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ellipsoids import (
    Ellipsoid,
    HyperRectangle,
    max_scaled_distance,
    minkowski_sum_outer,
    rect_to_ellipsoid,
)
from .gp import GPPosterior

__all__ = [
    "LipschitzConstants",
    "FeedbackLaw",
    "PriorModel",
    "AffinePrior",
    "PropagationScheme",
    "one_step",
    "multi_step",
]

POINT_EPS = 1e-9


class PropagationScheme(enum.Enum):
    LOCALLY_CONSTANT = "locally_constant"
    MEAN_LINEARIZED = "mean_linearized"


@dataclass(frozen=True)
class LipschitzConstants:
    """Lipschitz data for the remainder bounds, one constant per output row.

    grad_h:   Lipschitz constants of the prior-model gradient
    g:        Lipschitz constants of the unknown model error
    grad_mu:  Lipschitz constants of the posterior-mean gradient
    sigma:    Lipschitz constants of the posterior standard deviation

    Scalars broadcast across outputs. Keeping these per output matters in
    practice: a nearly-exact row of the prior (e.g. a kinematic integrator)
    should not inherit the worst row's remainder inflation.

    g_matrix, when given, refines `g` with per-input-coordinate constants
    (shape outputs x inputs): |g_j(z) - g_j(zb)| <= sum_i G_ji |z_i - zb_i|.
    The coordinate-wise Lagrange bound is what keeps the remainder usable
    on systems whose error is sensitive to one coordinate (the pole angle)
    while the tube is wide in another (the velocities): the lumped
    two-norm constant charges the full tube radius at the worst rate.
    """

    grad_h: np.ndarray
    g: np.ndarray | float = 0.0
    grad_mu: np.ndarray | None = None
    sigma: np.ndarray | float = 0.0
    g_matrix: np.ndarray | None = None

    def __post_init__(self):
        gh = np.asarray(self.grad_h, dtype=float).reshape(-1)
        p = gh.shape[0]

        def vec(val, name):
            arr = np.asarray(val, dtype=float).reshape(-1)
            if arr.shape[0] == 1:
                arr = np.full(p, arr[0])
            if arr.shape != gh.shape:
                raise ValueError(f"{name} must broadcast to {p} outputs")
            if np.any(arr < 0):
                raise ValueError("Lipschitz constants must be nonnegative")
            return arr

        if np.any(gh < 0):
            raise ValueError("Lipschitz constants must be nonnegative")
        object.__setattr__(self, "grad_h", gh)
        object.__setattr__(self, "g", vec(self.g, "g"))
        gm = np.zeros(p) if self.grad_mu is None else self.grad_mu
        object.__setattr__(self, "grad_mu", vec(gm, "grad_mu"))
        object.__setattr__(self, "sigma", vec(self.sigma, "sigma"))
        if self.g_matrix is not None:
            G = np.atleast_2d(np.asarray(self.g_matrix, dtype=float))
            if G.shape[0] != p or np.any(G < 0):
                raise ValueError("g_matrix must be (outputs x inputs), nonnegative")
            object.__setattr__(self, "g_matrix", G)


@dataclass(frozen=True)
class FeedbackLaw:
    """Affine law u(x) = K (x - anchor) + k."""

    K: np.ndarray
    k: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        k = np.asarray(self.k, dtype=float).reshape(-1)
        anchor = np.asarray(self.anchor, dtype=float).reshape(-1)
        if K.shape != (k.shape[0], anchor.shape[0]):
            raise ValueError("feedback law dimensions disagree")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "anchor", anchor)

    @property
    def u_dim(self) -> int:
        return self.k.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.K @ (x - self.anchor) + self.k

    def re_anchored(self, anchor) -> "FeedbackLaw":
        return FeedbackLaw(self.K, self.k, anchor)


@dataclass(frozen=True)
class PriorModel:
    """Known part of the dynamics with its Jacobian.

    h(x, u) returns the predicted next state; jacobian(x, u) returns
    (A, B), the derivatives with respect to state and control.
    """

    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class AffinePrior:
    """Prior h(x, u) = A x + B u + c; the Jacobian is constant."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=float).reshape(-1)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0] or c.shape[0] != A.shape[0]:
            raise ValueError("affine prior dimensions disagree")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    def h(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(np.asarray(u, dtype=float)) + self.c

    def jacobian(self, x, u):
        return self.A, self.B


def point_ellipsoid(x, eps: float = POINT_EPS) -> Ellipsoid:
    """Degenerate 'singleton' R_0 = {x} regularized to a tiny ball."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return Ellipsoid(x, eps * np.eye(x.shape[0]))


def one_step(R: Ellipsoid, law: FeedbackLaw, prior, gp: GPPosterior,
             lip: LipschitzConstants,
             scheme: PropagationScheme = PropagationScheme.LOCALLY_CONSTANT) -> Ellipsoid:
    """Over-approximate the reachable set after one step under `law`.

    The linearization point is (R.center, law.k). The affine image of R
    under the linearized closed loop is summed (outer Minkowski) with an
    ellipsoidal cover of the confidence hyper-rectangle that accounts for
    the GP interval at the linearization point plus Lipschitz remainder
    terms over the input set.
    """
    p = R.dim
    q = law.u_dim
    p_t = R.center
    zbar = np.concatenate([p_t, law.k])
    h_val = np.asarray(prior.h(p_t, law.k), dtype=float).reshape(-1)
    A_h, B_h = prior.jacobian(p_t, law.k)
    A_h = np.atleast_2d(np.asarray(A_h, dtype=float))
    B_h = np.asarray(B_h, dtype=float).reshape(p, q)
    mu, sigma = gp.predict(zbar)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise ValueError("non-finite statistical-model output at the linearization point")

    S = np.vstack([np.eye(p), law.K])
    l = max_scaled_distance(R.shape, S)

    if scheme is PropagationScheme.LOCALLY_CONSTANT:
        H = A_h + B_h @ law.K
        if lip.g_matrix is not None:
            # per-coordinate supports of the input set: max |(S x)_i| over
            # E(0, Q) is the i-th row norm of S L
            supports = np.linalg.norm(S @ R.chol, axis=1)
            g_term = lip.g_matrix @ supports
        else:
            g_term = lip.g * l
        widths = gp.beta * sigma + 0.5 * lip.grad_h * l ** 2 + g_term
    elif scheme is PropagationScheme.MEAN_LINEARIZED:
        dmu, _ = gp.predict_jacobians(zbar)
        A_mu, B_mu = dmu[:, :p], dmu[:, p:]
        H = (A_h + A_mu) + (B_h + B_mu) @ law.K
        widths = gp.beta * (sigma + lip.sigma * l) \
            + 0.5 * (lip.grad_h + lip.grad_mu) * l ** 2
    else:
        raise ValueError(f"unknown propagation scheme {scheme!r}")

    center = h_val + mu
    HL = H @ R.chol
    affine_part = Ellipsoid(center, HL @ HL.T)
    remainder = rect_to_ellipsoid(HyperRectangle(np.zeros(p), widths))
    return minkowski_sum_outer(affine_part, remainder)


def multi_step(R0: Ellipsoid, laws: list[FeedbackLaw], prior, gp: GPPosterior,
               lip: LipschitzConstants,
               scheme: PropagationScheme = PropagationScheme.LOCALLY_CONSTANT) -> list[Ellipsoid]:
    """Iterate one_step along a sequence of laws, re-anchoring each law at
    the center of the ellipsoid it acts on. Returns [R_1, ..., R_T]."""
    if len(laws) < 1:
        raise ValueError("need at least one feedback law")
    out: list[Ellipsoid] = []
    current = R0
    for law in laws:
        law = law.re_anchored(current.center)
        current = one_step(current, law, prior, gp, lip, scheme)
        out.append(current)
    return out
