"""Dynamic discrepancy calibration and upscaling for a CO2 sorbent model."""

from .bss_anova import ComponentSpec, DiscrepancyModel, KLBasis, build_kl_basis, default_layout, eval_discrepancy
from .calibration import Chain, McmcConfig, PriorSpec, hpd_interval, posterior_predictive, run_mcmc
from .data_io import ExperimentSeries, gen_profiles, gen_synthetic, read_tga, select_snippet
from .dynamics import (
    InputProfile,
    PhysicalConstants,
    RealityParams,
    SolverConfig,
    SolverFailure,
    SorbentParams,
    solve_reality,
    solve_sorbent,
)
from .upscale import ReactorConfig, propagate, reality_reactor, simulate_reactor

__version__ = "0.1.0"

__all__ = [
    "Chain", "ComponentSpec", "DiscrepancyModel", "ExperimentSeries", "InputProfile", "KLBasis", "McmcConfig",
    "PhysicalConstants", "PriorSpec", "ReactorConfig", "RealityParams", "SolverConfig", "SolverFailure",
    "SorbentParams", "build_kl_basis", "default_layout", "eval_discrepancy", "gen_profiles", "gen_synthetic",
    "hpd_interval", "posterior_predictive", "propagate", "read_tga", "reality_reactor", "run_mcmc",
    "select_snippet", "simulate_reactor", "solve_reality", "solve_sorbent",
]
