"""Provably-safe learning-based MPC with GP models and ellipsoidal tubes."""

from .ellipsoids import (
    Ellipsoid,
    HyperRectangle,
    Polytope,
    affine_transform,
    ellipsoid_in_polytope_residuals,
    max_scaled_distance,
    minkowski_sum_outer,
    rect_to_ellipsoid,
)
from .gp import (
    Dataset,
    GPPosterior,
    KernelSpec,
    beta_from_theory,
    fit,
    max_variance_subselect,
    mutual_information,
)
from .reachability import (
    AffinePrior,
    FeedbackLaw,
    LipschitzConstants,
    PriorModel,
    PropagationScheme,
    multi_step,
    one_step,
)
from .constraints import ConstraintSet, control_residuals, state_residuals, terminal_residuals
from .performance import (
    GaussianBelief,
    PerformanceObjective,
    assemble_coupled_problem,
    expected_saturating_cost,
    moment_propagate,
)
from .controller import (
    MPCProblem,
    PerformanceSpec,
    SafeMPCController,
    SafetyPlan,
    SolverConfig,
    certify,
    solve,
)
from .envs import (
    CartPoleParams,
    EnvSpec,
    PendulumParams,
    build_safe_set,
    cartpole_step,
    linearize_discretize,
    lqr_synthesize,
    make_cartpole,
    make_pendulum,
    pendulum_step,
)

__version__ = "0.1.0"
