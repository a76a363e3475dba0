"""Reference computations that share no code with the package.

Each oracle uses a different route from the implementation: dense N x N
matrices instead of group moments, closed-form ANOVA instead of optimisation,
scipy distributions instead of hand-rolled tails.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats


def dense_profiled_reml(theta: float, y, X, groups) -> float:
    """-2 x profiled REML log-likelihood from explicit N x N matrices."""
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    labels = np.unique(groups, return_inverse=True)[1]
    Z = np.eye(labels.max() + 1)[labels]
    N, p = X.shape
    H = np.eye(N) + theta**2 * Z @ Z.T
    Hi = np.linalg.inv(H)
    XtHiX = X.T @ Hi @ X
    beta = np.linalg.solve(XtHiX, X.T @ Hi @ y)
    r = y - X @ beta
    s2 = float(r @ Hi @ r) / (N - p)
    return ((N - p) * (1 + math.log(2 * math.pi) + math.log(s2))
            + np.linalg.slogdet(H)[1] + np.linalg.slogdet(XtHiX)[1])


def anova_one_way(y, groups) -> tuple[float, float, float, float]:
    """Balanced one-way ANOVA estimates (sigma2, tau00, MSB, MSW)."""
    y = np.asarray(y, float)
    groups = np.asarray(groups)
    levels = np.unique(groups)
    g = len(levels)
    n = len(y) // g
    means = np.array([y[groups == lv].mean() for lv in levels])
    msb = n * np.sum((means - y.mean()) ** 2) / (g - 1)
    msw = sum(np.sum((y[groups == lv] - m) ** 2) for lv, m in zip(levels, means)) / (g * (n - 1))
    return msw, (msb - msw) / n, msb, msw


def shrout_lane(person, person_time, residual, person_item=0.0, n_items=5, n_times=49):
    """Within-person change (R_Cn) and between-person (R_KRn) reliability."""
    r_cn = person_time / (person_time + residual / n_items)
    num = person + person_item / n_items
    r_krn = num / (num + person_time / n_times + residual / (n_times * n_items))
    return r_cn, r_krn


def binomial_tail(k: int, n: int, p0: float) -> float:
    return float(stats.binom.sf(k - 1, n, p0))


def pearson(x, y) -> tuple[float, float]:
    r, p = stats.pearsonr(x, y)
    return float(r), float(p)


def cronbach_alpha(items) -> float:
    x = np.asarray(items, float)
    x = x[~np.isnan(x).any(axis=1)]
    k = x.shape[1]
    return k / (k - 1) * (1 - x.var(axis=0, ddof=1).sum() / x.sum(axis=1).var(ddof=1))


def balanced_intercept_inference(y, groups) -> tuple[float, float, float]:
    """Intercept-only balanced model: (estimate, standard error, df) in closed form."""
    y = np.asarray(y, float)
    g = len(np.unique(groups))
    _, _, msb, _ = anova_one_way(y, groups)
    return float(y.mean()), math.sqrt(msb / len(y)), float(g - 1)


def three_way_mean_squares(x) -> dict[str, float]:
    """Mean squares of a complete persons x times x items array from raw totals.

    Uses the textbook "sum of squared totals over cell count minus correction
    term" formulas rather than centred effects.
    """
    x = np.asarray(x, float)
    a, b, c = x.shape
    ct = x.sum() ** 2 / x.size
    ss_p = (x.sum(axis=(1, 2)) ** 2).sum() / (b * c) - ct
    ss_t = (x.sum(axis=(0, 2)) ** 2).sum() / (a * c) - ct
    ss_i = (x.sum(axis=(0, 1)) ** 2).sum() / (a * b) - ct
    ss_pt = (x.sum(axis=2) ** 2).sum() / c - ct - ss_p - ss_t
    ss_pi = (x.sum(axis=1) ** 2).sum() / b - ct - ss_p - ss_i
    ss_ti = (x.sum(axis=0) ** 2).sum() / a - ct - ss_t - ss_i
    ss_e = (x**2).sum() - ct - ss_p - ss_t - ss_i - ss_pt - ss_pi - ss_ti
    return {
        "p": ss_p / (a - 1), "t": ss_t / (b - 1), "i": ss_i / (c - 1),
        "pt": ss_pt / ((a - 1) * (b - 1)), "pi": ss_pi / ((a - 1) * (c - 1)),
        "ti": ss_ti / ((b - 1) * (c - 1)), "e": ss_e / ((a - 1) * (b - 1) * (c - 1)),
    }


def simulate_ptI(rng, a, b, c, person, person_time, residual, item=0.0, time=0.0):
    """Persons x times x items array with the given variance components."""
    return (rng.normal(0, math.sqrt(person), (a, 1, 1))
            + rng.normal(0, math.sqrt(time), (1, b, 1))
            + rng.normal(0, math.sqrt(item), (1, 1, c))
            + rng.normal(0, math.sqrt(person_time), (a, b, 1))
            + rng.normal(0, math.sqrt(residual), (a, b, c)))
