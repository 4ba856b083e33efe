"""Bilevel optimization with Nystrom-approximated implicit hypergradients."""
from .blo import BilevelProblem, BloConfig, CgSolver, ExactSolver, NystromSolver, recommended_schedule, solve
from .ihvp import (
    DenseOperator,
    HessianOperator,
    IhvpReport,
    NystromSketch,
    SamplingMode,
    cg_ihvp,
    exact_ihvp,
    nystrom_error_bound,
    nystrom_ihvp,
    nystrom_pcg,
    sample_columns,
)
from .linalg import condition_number, dense_inverse, make_rng, spd_solve, sym_eig

__version__ = "0.1.0"
