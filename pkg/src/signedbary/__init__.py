"""Signed Wasserstein barycenters on regular grids.

Affine weights may be negative. The solver runs a preconditioned min-max
iteration on Kantorovich potentials and recovers the barycenter as a
pushforward; exact 1D and small discrete oracles certify the results.
"""

from .core import (
    CostModel,
    Grid,
    GridMeasure,
    Potential,
    Problem,
    WeightVector,
    gaussian_on_grid,
    ingest_density,
    read_binary,
    validate_weights,
    write_binary,
    write_density_csv,
)
from .ctransform import c_concavify, c_transform, ctransform_brute, ctransform_fast_quadratic, transform_law_suite
from .diagnostics import diagnose, duality_gap, quadratic_saddle_criterion
from .errors import *
from .oracle import (
    gaussian_signed_barycenter,
    ot_1d_exact,
    ot_small_exact,
    signed_barycenter_1d,
    solve_one_positive,
    wasserstein_1d,
)
from .solver import SolverConfig, SolveResult, solve, solver_step
from .transport import extract_map, pushforward, quantile_of

__version__ = "0.1.0"
