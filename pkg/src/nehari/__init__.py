"""Finite-difference Nehari-manifold solver for gradient elliptic systems on dumbbell domains."""

from .constraint import ConstraintSpec, coercivity_check, multiplier, residuals, scale_to_nehari
from .energy import Potential, check_assumptions, d_energy, energy, norm_sq
from .errors import (
    ConfigError,
    CutoffOverlapError,
    DegenerateGeneratorError,
    EstimationError,
    GeometryError,
    NehariError,
    PreconditionError,
    ResolutionError,
    RetractionError,
    SolveError,
)
from .experiments import build_initializer, run_multiplicity, subdomain_ground_state
from .grid_domain import (
    GridDomain,
    build_cutoffs,
    build_dumbbell,
    compute_constants,
    estimate_c_eta,
    estimate_sobolev,
)
from .solver import SolverConfig, lower_bound_check, minimize, ps_diagnostic

__version__ = "0.1.0"
