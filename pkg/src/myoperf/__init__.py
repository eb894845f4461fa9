"""Bayesian and least-squares estimation of two-compartment exchange kinetics
for myocardial perfusion MRI."""

__version__ = "0.1.0"

from .kinetics import (  # noqa: E402
    AcquisitionConfig,
    DegenerateModelError,
    KineticParams,
    SampledCurve,
    forward_model,
    gamma_variate_aif,
    ode_oracle,
    signal_to_concentration,
)
from .phantom import build_phantom, simulate_series  # noqa: E402
from .nlls import FitBounds, fit_map_nlls, fit_voxel_nlls  # noqa: E402
from .bayes import PriorSpec, run_chain  # noqa: E402
from .analysis import cost_surface, mann_whitney_u, monte_carlo_study, nmse  # noqa: E402

__all__ = [
    "AcquisitionConfig", "DegenerateModelError", "FitBounds", "KineticParams", "PriorSpec",
    "SampledCurve", "build_phantom", "cost_surface", "fit_map_nlls", "fit_voxel_nlls",
    "forward_model", "gamma_variate_aif", "mann_whitney_u", "monte_carlo_study", "nmse",
    "ode_oracle", "run_chain", "signal_to_concentration", "simulate_series",
]
