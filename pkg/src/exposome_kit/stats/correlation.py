"""Pearson tests, internal consistency and the exact binomial tail."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps


@dataclass(frozen=True)
class Correlation:
    """Pearson r with its two-sided p; ``defined`` is False for zero variance."""

    r: float
    p: float
    n: int
    defined: bool = True
    reason: str = ""

    @property
    def df(self) -> int:
        return self.n - 2


def pearson(x, y) -> Correlation:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return Correlation(math.nan, math.nan, n, False, "zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return Correlation(r, 0.0, n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Correlation(r, float(2.0 * sps.t.sf(abs(t), n - 2)), n)


def cronbach_alpha(items) -> float:
    """Cronbach's alpha for a persons x items matrix; rows with NaN are dropped."""
    data = np.asarray(items, dtype=float)
    if data.ndim != 2:
        raise ValueError("expected a 2-d persons x items matrix")
    data = data[~np.isnan(data).any(axis=1)]
    n, k = data.shape
    if k < 2 or n < 2:
        raise ValueError(f"need >= 2 items and >= 2 persons, got {k} items, {n} persons")
    total_var = data.sum(axis=1).var(ddof=1)
    if total_var == 0:
        return math.nan
    return k / (k - 1) * (1.0 - data.var(axis=0, ddof=1).sum() / total_var)


def _log_binom_pmf(i: int, n: int, p0: float) -> float:
    return (
        math.lgamma(n + 1)
        - math.lgamma(i + 1)
        - math.lgamma(n - i + 1)
        + i * math.log(p0)
        + (n - i) * math.log1p(-p0)
    )


def binomial_exceedance(k_hits: int, n: int, p0: float = 0.05) -> float:
    """One-sided exact tail ``P(X >= k_hits)`` for ``X ~ Binomial(n, p0)``."""
    if not 0 <= k_hits <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k_hits}, n={n}")
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must lie strictly between 0 and 1")
    if k_hits == 0:
        return 1.0
    logs = [_log_binom_pmf(i, n, p0) for i in range(k_hits, n + 1)]
    top = max(logs)
    return min(1.0, math.exp(top) * math.fsum(math.exp(v - top) for v in logs))
