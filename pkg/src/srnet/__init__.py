"""Random deep networks with stable-rank constrained weights."""

from . import activations, geometry, kernels, linalg, network, sampler
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FixedPointError,
    IdxParseError,
    InfeasibleProjectionError,
    NumericalFailure,
    PreconditionError,
    PSDViolation,
    RejectionBudgetExhausted,
    SrnetError,
    UndefinedStableRankError,
)
from .linalg import make_rng, stable_rank, spectral_norm
from .sampler import SpectrumSpec, assemble_weight, project_stable_rank

__version__ = "0.1.0"
