"""Quantile-based realized variance estimation for high-frequency returns.

Estimators built from extreme order statistics of scaled return blocks,
with jump/outlier robustness, a noise-corrected pre-averaged variant,
simulation models for benchmarking, and a CLI for tick-data pipelines.
"""

from .bench import (
    Contamination,
    EstimatorSpec,
    ExperimentConfig,
    bias_efficiency_experiment,
    coverage_experiment,
    efficiency_table,
    mse_curve_K,
)
from .constants import (
    ABSOLUTE,
    SIGNED,
    Integration,
    MomentKey,
    MonteCarlo,
    ScalingTable,
    lookup,
    nu_moment,
    optimal_weights,
    theta_asymptotic,
    theta_blocked,
    theta_subsampled,
)
from .errors import (
    CacheError,
    ConfigError,
    DataError,
    NumericalError,
    QRVError,
)
from .estimators import (
    BLOCKED,
    SUBSAMPLED,
    EstimateResult,
    QuantileConfig,
    ReturnSeries,
    bpv,
    feasible_ci,
    log_returns,
    medrv,
    minrv,
    qrq,
    qrv,
    rv,
    trv,
)
from .preavg import (
    TRIANGULAR,
    NoiseEstimate,
    PiecewiseLinearWeight,
    PreAvgConfig,
    default_preavg_window,
    msrv,
    msrv_optimal_q,
    noise_variance,
    preaveraged_returns,
    psi_constants,
    qrv_star,
    qrv_star_avar,
)
from .simulate import (
    ModelSpec,
    PathResult,
    add_jumps,
    add_noise,
    add_outlier,
    simulate_path,
)

__version__ = "0.1.0"

__all__ = [
    "ABSOLUTE",
    "BLOCKED",
    "SIGNED",
    "SUBSAMPLED",
    "TRIANGULAR",
    "CacheError",
    "ConfigError",
    "Contamination",
    "DataError",
    "EstimateResult",
    "EstimatorSpec",
    "ExperimentConfig",
    "Integration",
    "ModelSpec",
    "MomentKey",
    "MonteCarlo",
    "NoiseEstimate",
    "NumericalError",
    "PathResult",
    "PiecewiseLinearWeight",
    "PreAvgConfig",
    "QRVError",
    "QuantileConfig",
    "ReturnSeries",
    "ScalingTable",
    "add_jumps",
    "add_noise",
    "add_outlier",
    "bias_efficiency_experiment",
    "bpv",
    "coverage_experiment",
    "default_preavg_window",
    "efficiency_table",
    "feasible_ci",
    "log_returns",
    "lookup",
    "medrv",
    "minrv",
    "mse_curve_K",
    "msrv",
    "msrv_optimal_q",
    "noise_variance",
    "nu_moment",
    "optimal_weights",
    "preaveraged_returns",
    "psi_constants",
    "qrq",
    "qrv",
    "qrv_star",
    "qrv_star_avar",
    "rv",
    "simulate_path",
    "theta_asymptotic",
    "theta_blocked",
    "theta_subsampled",
    "trv",
]
