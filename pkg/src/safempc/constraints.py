"""Closed-form containment residuals for the MPC safety constraints.

Every constraint is reduced to a vector of scalar residuals that are
nonpositive exactly when the corresponding ellipsoid is inside the
polytope. Rows are pre-normalized to unit norm at construction so one
feasibility tolerance and one penalty weight mean the same thing across
state, control and terminal constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .ellipsoids import Ellipsoid, Polytope, ellipsoid_in_polytope_residuals
from .reachability import FeedbackLaw

__all__ = [
    "ConstraintSet",
    "state_residuals",
    "control_residuals",
    "terminal_residuals",
]


def _check_subset(inner: Polytope, outer: Polytope, tol: float = 1e-9) -> None:
    """Verify inner <= outer by maximizing each outer row over inner (LP)."""
    for i in range(outer.num_rows):
        resi = linprog(
            -outer.H[i],
            A_ub=inner.H,
            b_ub=inner.h,
            bounds=[(None, None)] * inner.dim,
            method="highs",
        )
        if resi.status == 3:  # unbounded: inner sticks out of every half-space
            raise ValueError("terminal set is unbounded along an outer constraint")
        if not resi.success:
            raise ValueError(f"containment LP failed: {resi.message}")
        if -resi.fun > outer.h[i] + tol:
            raise ValueError(
                f"terminal set violates state constraint row {i}: "
                f"max {-resi.fun:.6g} > {outer.h[i]:.6g}"
            )


@dataclass(frozen=True)
class ConstraintSet:
    """State, control and terminal polytopes; state may be None (= R^p).

    The terminal set is verified to be contained in the state set at
    construction time.
    """

    state: Polytope | None
    control: Polytope
    terminal: Polytope

    def __post_init__(self):
        state = self.state.normalized() if self.state is not None else None
        control = self.control.normalized()
        terminal = self.terminal.normalized()
        if state is not None:
            if state.dim != terminal.dim:
                raise ValueError("state/terminal dimensions disagree")
            _check_subset(terminal, state)
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "control", control)
        object.__setattr__(self, "terminal", terminal)

    @property
    def state_dim(self) -> int:
        return self.terminal.dim

    @property
    def control_dim(self) -> int:
        return self.control.dim


def state_residuals(R: Ellipsoid, X: Polytope | None) -> np.ndarray:
    """Containment residuals of R in the state polytope; empty if unbounded."""
    if X is None:
        return np.zeros(0)
    return ellipsoid_in_polytope_residuals(R, X)


def control_residuals(R: Ellipsoid, law: FeedbackLaw, U: Polytope) -> np.ndarray:
    """Containment residuals of u(R) = E(k, K Q K^T) in the control polytope.

    Computed directly from the Cholesky factor of Q so a zero feedback
    matrix degenerates cleanly to the pointwise check of k.
    """
    if law.K.shape[1] != R.dim or U.dim != law.u_dim:
        raise ValueError("dimension mismatch in control residuals")
    HKL = U.H @ (law.K @ R.chol)
    spread = np.linalg.norm(HKL, axis=1)
    return U.H @ law.k + spread - U.h


def terminal_residuals(R_T: Ellipsoid, X_safe: Polytope) -> np.ndarray:
    """Containment residuals of the final ellipsoid in the terminal set."""
    return ellipsoid_in_polytope_residuals(R_T, X_safe)
