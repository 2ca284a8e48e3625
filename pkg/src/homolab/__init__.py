"""homolab: corrector calculus, effective coefficients, and pointwise
two-scale expansion checks for divergence-form diffusions in random and
periodic environments."""

__version__ = "0.1.0"

from .errors import (
    ConfigParseError,
    DiscretizationInconsistencyError,
    InvalidParameterError,
    SimulationBlowupError,
    SolverFailureError,
    TruncationRadiusError,
)
from .fields import (
    CoefficientField,
    MarkLaw,
    PoissonCloud,
    make_field,
    resample_cell,
    sample_cloud,
)
from .lattice import DivFormOperator, Grid, GridFunction, assemble, grad, solve

__all__ = [
    "CoefficientField",
    "ConfigParseError",
    "DiscretizationInconsistencyError",
    "DivFormOperator",
    "Grid",
    "GridFunction",
    "InvalidParameterError",
    "MarkLaw",
    "PoissonCloud",
    "SimulationBlowupError",
    "SolverFailureError",
    "TruncationRadiusError",
    "assemble",
    "grad",
    "make_field",
    "resample_cell",
    "sample_cloud",
    "solve",
]
