"""Adaptive multilevel Monte Carlo estimation of probabilities P(g > 0).

The estimator writes P(g > 0) = E[H(g)] for the Heaviside observable H
and telescopes it over a hierarchy of approximations g_0, g_1, ... whose
cost grows like 2^{gamma l}.  Samples whose sign is statistically
uncertain are adaptively refined to deeper levels, which restores the
variance and complexity rates that the discontinuous observable would
otherwise destroy.  Three problem families ship with the engine: a
nested-simulation risk model, GBM digital options under Euler or
Milstein discretization, and a closed-form error model with observable
g for end-to-end validation.
"""

from .config import (
    Experiment,
    ExperimentManifest,
    build_experiment,
    load_config,
    manifest_for,
    parse_config_text,
    settings_hash,
    write_manifest,
)
from .core import (
    LevelStats,
    MlmcConfig,
    MlmcResult,
    RateFit,
    RBound,
    complexity_regime,
    extrapolate_bias,
    fit_rates,
    optimal_allocation,
    optimal_theta,
    r_bound,
    run_mlmc,
    sample_level,
    select_start_level,
)
from .errors import CalibrationError, ConfigurationError, FitError
from .nested import TRUE_PROBABILITY, NestedModelSpec, NestedProblem
from .refine import (
    CorrectionSample,
    RefinementParams,
    adaptive_sample,
    correction_sample,
    heaviside,
    refinement_threshold,
)
from .sde import (
    Ball,
    BrownianPath,
    GbmDigitalProblem,
    GbmSpec,
    Halfspace,
    SharedPath,
    brownian_init,
    brownian_refine,
    calibrate_strike,
    coarse_from_fine,
    digital_true_value,
    sample_gbm_parameters,
    signed_distance,
)
from .streams import Stream, derive_stream
from .synthetic import (
    SyntheticProblem,
    SyntheticSpec,
    mu_for_target,
    synthetic_correction,
)

__all__ = [
    "Ball",
    "BrownianPath",
    "CalibrationError",
    "ConfigurationError",
    "CorrectionSample",
    "Experiment",
    "ExperimentManifest",
    "FitError",
    "GbmDigitalProblem",
    "GbmSpec",
    "Halfspace",
    "LevelStats",
    "MlmcConfig",
    "MlmcResult",
    "NestedModelSpec",
    "NestedProblem",
    "RBound",
    "RateFit",
    "RefinementParams",
    "SharedPath",
    "Stream",
    "SyntheticProblem",
    "SyntheticSpec",
    "TRUE_PROBABILITY",
    "adaptive_sample",
    "brownian_init",
    "brownian_refine",
    "build_experiment",
    "calibrate_strike",
    "coarse_from_fine",
    "complexity_regime",
    "correction_sample",
    "derive_stream",
    "digital_true_value",
    "extrapolate_bias",
    "fit_rates",
    "heaviside",
    "load_config",
    "manifest_for",
    "mu_for_target",
    "optimal_allocation",
    "optimal_theta",
    "parse_config_text",
    "r_bound",
    "refinement_threshold",
    "run_mlmc",
    "sample_gbm_parameters",
    "sample_level",
    "select_start_level",
    "settings_hash",
    "signed_distance",
    "synthetic_correction",
    "write_manifest",
]
