"""Generalizability reliability for person x time x item designs.

Variance components come from the expected mean squares of a fully crossed
random three-way layout with one observation per cell; the person x time x
item interaction is confounded with error and reported as ``residual``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

MISSING_WARN_FRACTION = 0.20


class DegenerateDesignError(ValueError):
    pass


@dataclass(frozen=True)
class VarianceComponents:
    person: float
    time: float
    item: float
    person_time: float
    person_item: float
    time_item: float
    residual: float


@dataclass(frozen=True)
class ReliabilityResult:
    r_cn: float
    r_krn: float
    components: VarianceComponents
    n_persons: int
    n_times: float
    n_items: int
    missing_fraction: float
    notes: tuple[str, ...] = field(default=())


def variance_components(data) -> tuple[VarianceComponents, float]:
    """Method-of-moments components, negatives clamped to zero.

    Missing cells (NaN) are tolerated through available-case marginal means;
    the balanced degrees of freedom are kept.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 3:
        raise DegenerateDesignError("expected a persons x times x items array")
    a, b, c = x.shape
    if min(a, b, c) < 2:
        raise DegenerateDesignError(f"every dimension needs >= 2 levels, got {x.shape}")
    obs = ~np.isnan(x)
    missing = 1.0 - obs.mean()
    if not obs.any():
        raise DegenerateDesignError("no observed cells")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        g = np.nanmean(x)
        mp = np.nanmean(x, axis=(1, 2))[:, None, None]
        mt = np.nanmean(x, axis=(0, 2))[None, :, None]
        mi = np.nanmean(x, axis=(0, 1))[None, None, :]
        mpt = np.nanmean(x, axis=2)[:, :, None]
        mpi = np.nanmean(x, axis=1)[:, None, :]
        mti = np.nanmean(x, axis=0)[None, :, :]

    def ss(effect):
        e = np.broadcast_to(effect, x.shape)
        return float(np.sum(np.where(obs, e, 0.0) ** 2))

    ms_p = ss(mp - g) / (a - 1)
    ms_t = ss(mt - g) / (b - 1)
    ms_i = ss(mi - g) / (c - 1)
    ms_pt = ss(mpt - mp - mt + g) / ((a - 1) * (b - 1))
    ms_pi = ss(mpi - mp - mi + g) / ((a - 1) * (c - 1))
    ms_ti = ss(mti - mt - mi + g) / ((b - 1) * (c - 1))
    resid = np.where(obs, x, 0.0) - (mpt + mpi + mti - mp - mt - mi + g)
    ms_e = ss(resid) / ((a - 1) * (b - 1) * (c - 1))

    def clamp(v):
        return max(0.0, float(v)) if math.isfinite(v) else 0.0

    comps = VarianceComponents(
        person=clamp((ms_p - ms_pt - ms_pi + ms_e) / (b * c)),
        time=clamp((ms_t - ms_pt - ms_ti + ms_e) / (a * c)),
        item=clamp((ms_i - ms_pi - ms_ti + ms_e) / (a * b)),
        person_time=clamp((ms_pt - ms_e) / c),
        person_item=clamp((ms_pi - ms_e) / b),
        time_item=clamp((ms_ti - ms_e) / a),
        residual=clamp(ms_e),
    )
    return comps, float(missing)


def reliability_coefficients(
    comps: VarianceComponents, n_items: float, n_times: float
) -> tuple[float, float]:
    """Within-person change reliability and between-person k-occasion reliability."""
    m, k = n_items, n_times
    r_cn_den = comps.person_time + comps.residual / m
    r_cn = comps.person_time / r_cn_den if r_cn_den > 0 else math.nan
    between = comps.person + comps.person_item / m
    r_krn_den = between + comps.person_time / k + comps.residual / (k * m)
    r_krn = between / r_krn_den if r_krn_den > 0 else math.nan
    return r_cn, r_krn


def multilevel_reliability(data) -> ReliabilityResult:
    """R_Cn and R_KRn for a persons x times x items array (NaN = missing cell)."""
    x = np.asarray(data, dtype=float)
    comps, missing = variance_components(x)
    notes = []
    if missing > MISSING_WARN_FRACTION:
        msg = f"{missing:.0%} of cells missing; mean squares use available cases"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    # occasions per person: the design width when balanced
    per_person = np.any(~np.isnan(x), axis=2).sum(axis=1)
    n_times = float(per_person[per_person > 0].mean())
    r_cn, r_krn = reliability_coefficients(comps, x.shape[2], n_times)
    return ReliabilityResult(
        r_cn, r_krn, comps, x.shape[0], n_times, x.shape[2], missing, tuple(notes)
    )
