"""Semiparametric density regression with a tilted gamma-CRM baseline."""

from .data import Dataset
from .errors import (ConfigError, DataError, MeanOutOfRange, NumericalError,
                     TiltcrmError, TruncationUnderflow)
from .functionals import (DensityGrid, baseline_cdf, baseline_density,
                          conditional_cdf, conditional_density, default_grid,
                          exceedance, mixture_quantile, quantile_curve)
from .measures import (BaseMeasure, DiscreteMeasure, LevyIntensity,
                       invert_tail, sample_crm, sample_posterior_crm,
                       tail_mass)
from .mcmc import (Kernel, McmcConfig, PosteriorDraws, Prior, run_chain,
                   silverman_halfwidth)
from .splines import SplineBasis, spline_design
from .tilting import (LogitLink, TiltedView, log_norm_const, retilt_to_mean,
                      solve_theta, solve_theta_many, tilted_mean, tilted_var)

__all__ = [
    "BaseMeasure", "ConfigError", "DataError", "Dataset", "DensityGrid",
    "DiscreteMeasure", "Kernel", "LevyIntensity", "LogitLink", "McmcConfig",
    "MeanOutOfRange", "NumericalError", "PosteriorDraws", "Prior",
    "SplineBasis", "TiltcrmError", "TiltedView", "TruncationUnderflow",
    "baseline_cdf", "baseline_density", "conditional_cdf",
    "conditional_density", "default_grid", "exceedance", "invert_tail",
    "log_norm_const", "mixture_quantile", "quantile_curve", "retilt_to_mean",
    "run_chain", "sample_crm", "sample_posterior_crm",
    "silverman_halfwidth", "solve_theta", "solve_theta_many",
    "spline_design", "tail_mass", "tilted_mean", "tilted_var",
]

__version__ = "0.1.0"
