"""Solvers for convex QPs whose equality and bound constraints act on disjoint variables."""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DimensionError, DisjointQPError,
                     InfeasibleStartError, InvariantViolation, ModelBlowUpError,
                     NotPositiveDefiniteError, RankDeficientError, SingularKKTError)
from .qp_core import (ActiveSet, DisjointQP, IterationRecord, Point, SolveTrace,
                      build_active_set, check_feasibility, evaluate_gradient,
                      evaluate_objective, load_qp, save_qp)
from .kkt_active_set import Alg1Settings, find_feasible_start, solve_alg1
from .nullspace_pcg import Alg2Settings, NullspaceProjection, solve_alg2
from .oracle import enumerate_solve, projected_gradient_solve, random_qp

__all__ = [
    "__version__",
    "ActiveSet", "DisjointQP", "IterationRecord", "Point", "SolveTrace",
    "build_active_set", "check_feasibility", "evaluate_gradient", "evaluate_objective",
    "load_qp", "save_qp",
    "Alg1Settings", "find_feasible_start", "solve_alg1",
    "Alg2Settings", "NullspaceProjection", "solve_alg2",
    "enumerate_solve", "projected_gradient_solve", "random_qp",
    "ConvergenceError", "DimensionError", "DisjointQPError", "InfeasibleStartError",
    "InvariantViolation", "ModelBlowUpError", "NotPositiveDefiniteError",
    "RankDeficientError", "SingularKKTError",
]
