"""Latent curvilinear structure ("fibres") in planar point patterns.

The pipeline: estimate an orientation field from anisotropy tensors around the
points (empirical Bayes, weighted by per-point signal probabilities), then
sample the posterior over fibre configurations with a continuous-time
birth-death MCMC, and summarize the trace (fibre counts, HPD intervals,
co-occurrence clusters, density rasters).
"""

from . import diagnostics, io, synthetic
from .diagnostics import (
    cluster_points,
    cooccurrence,
    density_raster,
    geweke,
    hpd_interval,
    summarize,
    z_m_statistic,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometry,
    DegenerateWeights,
    EmptyPattern,
    FibreFieldError,
    InvalidAllocation,
    NonPositiveDefinite,
    OutsideWindow,
    SingularField,
    SingularStart,
    TooShort,
    ZeroFibreLikelihood,
    ZeroVariance,
)
from .estimators import FibrePosteriorSampler, OrientationFieldEstimator
from .field import (
    AnalyticOrientationField,
    Fibre,
    OrientationGrid,
    circular_field,
    constant_field,
    estimate_field,
    local_tensors,
    ridge_wave_field,
    trace_fibre,
)
from .geometry import PointPattern, WindowRect
from .model import Allocation, Hyperparams, log_likelihood, log_posterior, log_prior
from .sampler import (
    ChainResult,
    ChainState,
    RatesConfig,
    TraceRecord,
    burn_in_time,
    death_rates,
    death_rates_general,
    run_chain,
)
from .synthetic import ScenarioConfig, generate
from .tensors import eig2, log_euclidean_mean, sym_tensor, tensor_exp, tensor_log

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "AnalyticOrientationField",
    "ChainResult",
    "ChainState",
    "ConfigError",
    "DataError",
    "DegenerateGeometry",
    "DegenerateWeights",
    "EmptyPattern",
    "Fibre",
    "FibreFieldError",
    "FibrePosteriorSampler",
    "Hyperparams",
    "InvalidAllocation",
    "NonPositiveDefinite",
    "OrientationFieldEstimator",
    "OrientationGrid",
    "OutsideWindow",
    "PointPattern",
    "RatesConfig",
    "ScenarioConfig",
    "SingularField",
    "SingularStart",
    "TooShort",
    "TraceRecord",
    "WindowRect",
    "ZeroFibreLikelihood",
    "ZeroVariance",
    "burn_in_time",
    "circular_field",
    "cluster_points",
    "constant_field",
    "cooccurrence",
    "death_rates",
    "death_rates_general",
    "density_raster",
    "diagnostics",
    "eig2",
    "estimate_field",
    "generate",
    "geweke",
    "hpd_interval",
    "io",
    "local_tensors",
    "log_euclidean_mean",
    "log_likelihood",
    "log_posterior",
    "log_prior",
    "ridge_wave_field",
    "run_chain",
    "summarize",
    "sym_tensor",
    "synthetic",
    "tensor_exp",
    "tensor_log",
    "trace_fibre",
    "z_m_statistic",
]
