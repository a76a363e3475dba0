"""Multilevel statistics: REML random-intercept models, reliability, screening."""
from .correlation import Correlation, binomial_exceedance, cronbach_alpha, pearson
from .lmm import (
    FitConvergenceError,
    LmmFit,
    LmmSpec,
    RankDeficientError,
    StatisticalDegeneracy,
    fit_random_intercept,
    icc,
    nakagawa_r2,
    reml_deviance,
    satterthwaite_df,
)
from .reliability import ReliabilityResult, VarianceComponents, multilevel_reliability
from .screening import ScreeningRow, ScreeningSummary, screen_features

__all__ = [
    "Correlation",
    "FitConvergenceError",
    "LmmFit",
    "LmmSpec",
    "RankDeficientError",
    "ReliabilityResult",
    "ScreeningRow",
    "ScreeningSummary",
    "StatisticalDegeneracy",
    "VarianceComponents",
    "binomial_exceedance",
    "cronbach_alpha",
    "fit_random_intercept",
    "icc",
    "multilevel_reliability",
    "nakagawa_r2",
    "pearson",
    "reml_deviance",
    "satterthwaite_df",
    "screen_features",
]
