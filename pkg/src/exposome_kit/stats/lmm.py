"""Random-intercept linear mixed models fitted by profiled REML.

The model is ``y = X beta + b[group] + e`` with ``b ~ N(0, tau00)`` and
``e ~ N(0, sigma2)``.  The criterion is profiled over ``beta`` and ``sigma2``
and minimized over the single ratio ``theta = sqrt(tau00 / sigma2)``.

Every quantity is assembled from per-group moments.  With ``Z = [X, y]``,
group means ``m_j`` and the pooled within-group cross-product ``W``::

    sigma2 * Z' V^-1 Z = W + sum_j n_j / (1 + n_j theta^2) * m_j m_j'

which is the rank-one inverse ``V_j^-1 = (I - theta^2/(1+n_j theta^2) J)/sigma2``
written in within/between form.  The Cholesky factor of that
``(p+1) x (p+1)`` matrix yields ``log|X'V^-1X|`` and the residual quadratic
form without any N x N work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy import stats as sps

from .optimize import ConvergenceError, brent_minimize

LOG_2PI = math.log(2.0 * math.pi)
THETA_UPPER = 1e4


class RankDeficientError(ValueError):
    """The fixed-effects design does not have full column rank."""


class StatisticalDegeneracy(ArithmeticError):
    """The data cannot support the requested model (e.g. zero residual variance)."""


class FitConvergenceError(RuntimeError):
    def __init__(self, message: str, best_theta: float, best_deviance: float):
        super().__init__(message)
        self.best_theta = best_theta
        self.best_deviance = best_deviance


@dataclass(frozen=True, eq=False)
class LmmSpec:
    """Outcome, fixed design (first column the intercept) and group labels."""

    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        groups = np.asarray(self.groups)
        if not (len(y) == X.shape[0] == len(groups)):
            raise ValueError(
                f"row mismatch: y={len(y)}, X={X.shape[0]}, groups={len(groups)}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("y and X must be finite; drop missing rows first")
        if not np.allclose(X[:, 0], 1.0):
            raise ValueError("first column of X must be the intercept")
        names = tuple(self.names) or ("(Intercept)",) + tuple(
            f"x{i}" for i in range(1, X.shape[1])
        )
        if len(names) != X.shape[1]:
            raise ValueError("one name per column of X required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "names", names)
        if len(np.unique(groups)) < 2:
            raise ValueError("at least two groups are required")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise RankDeficientError(f"design of shape {X.shape} is rank deficient")
        if X.shape[0] <= X.shape[1]:
            raise StatisticalDegeneracy("no residual degrees of freedom")

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @cached_property
    def _moments(self) -> "_Moments":
        return _Moments.build(self)


@dataclass(frozen=True)
class _Moments:
    n: np.ndarray  # group sizes
    means: np.ndarray  # (G, p+1) group means of [X, y]
    within: np.ndarray  # (p+1, p+1) pooled within-group cross-products
    order: np.ndarray  # canonical row order
    n_obs: int
    p: int
    y_shift: float = 0.0  # y is centred before the moments are formed

    @classmethod
    def build(cls, spec: LmmSpec) -> "_Moments":
        labels, codes = np.unique(spec.groups, return_inverse=True)
        # the intercept absorbs a shift of y, so centring only avoids cancellation
        shift = math.fsum(spec.y) / len(spec.y)
        Z = np.column_stack([spec.X, spec.y - shift])
        # canonical order makes every reduction independent of input row order
        keys = [Z[:, k] for k in range(Z.shape[1] - 1, -1, -1)] + [codes]
        order = np.lexsort(keys)
        Z, codes = Z[order], codes[order]
        n = np.bincount(codes, minlength=len(labels)).astype(float)
        sums = np.zeros((len(labels), Z.shape[1]))
        np.add.at(sums, codes, Z)
        means = sums / n[:, None]
        centered = Z - means[codes]
        within = centered.T @ centered
        return cls(n, means, within, order, Z.shape[0], spec.X.shape[1], shift)

    def cross(self, lam) -> np.ndarray:
        """sigma2 * Z'V^-1 Z for lam = theta^2 (scalar or 1-d array)."""
        lam = np.asarray(lam, dtype=float)
        w = self.n / (1.0 + np.multiply.outer(lam, self.n))
        return self.within + np.einsum("...g,gi,gj->...ij", w, self.means, self.means)

    def cross_grad(self, lam: float) -> np.ndarray:
        w = -(self.n**2) / (1.0 + lam * self.n) ** 2
        return np.einsum("g,gi,gj->ij", w, self.means, self.means)


def _factor(mom: _Moments, lam):
    """Return (log|A|, r) where A = sigma2 X'V^-1X and r the residual form."""
    M = mom.cross(lam)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        # y lies in the column space of X: residual form is zero
        p = mom.p
        L = np.linalg.cholesky(M[..., :p, :p])
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        return logdet, np.zeros_like(logdet)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    logdet = 2.0 * np.sum(np.log(diag[..., :-1]), axis=-1)
    return logdet, diag[..., -1] ** 2


def reml_deviance(theta, spec: LmmSpec):
    """-2 x restricted log-likelihood, profiled over beta and sigma2.

    ``theta`` may be a scalar or an array of ratios ``tau/sigma >= 0``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be non-negative")
    mom = spec._moments
    lam = theta**2
    dof = mom.n_obs - mom.p
    logdet, r = _factor(mom, lam)
    with np.errstate(divide="ignore"):
        dev = (
            dof * (np.log(r / dof) + 1.0 + LOG_2PI)
            + np.sum(np.log1p(np.multiply.outer(lam, mom.n)), axis=-1)
            + logdet
        )
    return float(dev) if dev.ndim == 0 else dev


def reml_deviance_components(sigma2: float, tau00: float, spec: LmmSpec) -> float:
    """Unprofiled REML deviance as a function of both variance components."""
    mom = spec._moments
    lam = tau00 / sigma2
    if np.any(1.0 + lam * mom.n <= 0):
        return math.inf
    dof = mom.n_obs - mom.p
    logdet, r = _factor(mom, lam)
    return float(
        dof * math.log(sigma2)
        + np.sum(np.log1p(lam * mom.n))
        + logdet
        + r / sigma2
        + dof * LOG_2PI
    )


def _reml_gradient(theta: float, mom: _Moments) -> float:
    """d deviance / d theta, used to polish the optimum."""
    lam = theta * theta
    p = mom.p
    M = mom.cross(lam)
    dM = mom.cross_grad(lam)  # d M / d lam
    A, b = M[:p, :p], M[:p, p]
    beta = np.linalg.solve(A, b)
    r = M[p, p] - b @ beta
    u = np.append(-beta, 1.0)
    d_lam = (
        (mom.n_obs - p) * (u @ dM @ u) / r
        + np.sum(mom.n / (1.0 + lam * mom.n))
        + np.trace(np.linalg.solve(A, dM[:p, :p]))
    )
    return float(2.0 * theta * d_lam)


def _polish(theta: float, lo: float, hi: float, mom: _Moments, max_iter: int = 60) -> float:
    """Refine a bracketed minimum by a safeguarded secant search on the gradient."""
    g_lo, g_hi = _reml_gradient(lo, mom), _reml_gradient(hi, mom)
    if not (g_lo < 0.0 < g_hi):
        return theta
    x = theta
    for _ in range(max_iter):
        g = _reml_gradient(x, mom)
        if g == 0.0:
            return x
        if g < 0.0:
            lo, g_lo = x, g
        else:
            hi, g_hi = x, g
        x_new = lo - g_lo * (hi - lo) / (g_hi - g_lo)
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 4e-16 * max(abs(x), 1e-300) or hi - lo <= 4e-16 * hi:
            return x_new
        x = x_new
    return x


@dataclass
class LmmFit:
    names: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    df: np.ndarray
    t: np.ndarray
    p: np.ndarray
    ci95: np.ndarray
    sigma2: float
    tau00: float
    icc: float
    r2_marginal: float
    r2_conditional: float
    n_obs: int
    n_groups: int
    reml_deviance: float
    theta: float
    converged: bool
    boundary: bool
    df_fallback: bool
    spec: LmmSpec = field(repr=False, compare=False)

    def coef(self, name: str) -> dict[str, float]:
        i = self.names.index(name)
        return {
            "estimate": float(self.beta[i]),
            "se": float(self.se[i]),
            "df": float(self.df[i]),
            "t": float(self.t[i]),
            "p": float(self.p[i]),
            "ci_low": float(self.ci95[i, 0]),
            "ci_high": float(self.ci95[i, 1]),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "coefficients": {name: self.coef(name) for name in self.names},
            "sigma2": self.sigma2,
            "tau00": self.tau00,
            "icc": self.icc,
            "r2_marginal": self.r2_marginal,
            "r2_conditional": self.r2_conditional,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "reml_deviance": self.reml_deviance,
            "theta": self.theta,
            "converged": self.converged,
            "boundary": self.boundary,
            "df_fallback": self.df_fallback,
        }


def icc(sigma2: float, tau00: float) -> float:
    if sigma2 <= 0 or tau00 < 0:
        raise ValueError("need sigma2 > 0 and tau00 >= 0")
    return tau00 / (tau00 + sigma2)


def nakagawa_r2(fit: LmmFit, X: np.ndarray | None = None) -> tuple[float, float]:
    """Marginal and conditional R^2 from the fixed-effect prediction variance."""
    X = fit.spec.X[fit.spec._moments.order] if X is None else np.asarray(X, float)
    var_f = float(np.var(X @ fit.beta))
    total = var_f + fit.tau00 + fit.sigma2
    return float(var_f / total), float((var_f + fit.tau00) / total)


def _coef_variance(sigma2: float, tau00: float, c: np.ndarray, mom: _Moments) -> float:
    M = mom.cross(tau00 / sigma2)
    A = M[: mom.p, : mom.p]
    return float(sigma2 * c @ np.linalg.solve(A, c))


def _vc_covariance(fit: LmmFit) -> np.ndarray | None:
    """Asymptotic covariance of (sigma2, tau00): 2 x inverse Hessian of the deviance."""
    x0 = np.array([fit.sigma2, fit.tau00])
    h = 1e-4 * np.array([fit.sigma2, max(fit.tau00, fit.sigma2)])

    def dev(v):
        return reml_deviance_components(v[0], v[1], fit.spec)

    H = np.empty((2, 2))
    f0 = dev(x0)
    for i in range(2):
        e_i = np.zeros(2)
        e_i[i] = h[i]
        H[i, i] = (dev(x0 + e_i) - 2.0 * f0 + dev(x0 - e_i)) / h[i] ** 2
        for j in range(i + 1, 2):
            e_j = np.zeros(2)
            e_j[j] = h[j]
            H[i, j] = H[j, i] = (
                dev(x0 + e_i + e_j)
                - dev(x0 + e_i - e_j)
                - dev(x0 - e_i + e_j)
                + dev(x0 - e_i - e_j)
            ) / (4.0 * h[i] * h[j])
    if not np.all(np.isfinite(H)):
        return None
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    return 2.0 * np.linalg.inv(H)


def satterthwaite_df(fit: LmmFit, contrast, vc_cov: np.ndarray | None = None) -> float:
    """Satterthwaite degrees of freedom for the contrast ``c' beta``.

    Falls back to the residual df ``n - p`` at the boundary fit or when the
    variance-component information is not positive definite.
    """
    c = np.asarray(contrast, dtype=float)
    mom = fit.spec._moments
    if fit.boundary:
        return float(mom.n_obs - mom.p)
    if vc_cov is None:
        vc_cov = _vc_covariance(fit)
        if vc_cov is None:
            return float(mom.n_obs - mom.p)
    x0 = np.array([fit.sigma2, fit.tau00])
    grad = np.empty(2)
    for i in range(2):
        h = 1e-5 * x0[i]
        up, down = x0.copy(), x0.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (
            _coef_variance(up[0], up[1], c, mom) - _coef_variance(down[0], down[1], c, mom)
        ) / (2.0 * h)
    g = _coef_variance(fit.sigma2, fit.tau00, c, mom)
    var_g = float(grad @ vc_cov @ grad)
    if var_g <= 0:
        return float(mom.n_obs - mom.p)
    return 2.0 * g * g / var_g


def fit_random_intercept(
    spec: LmmSpec, *, upper: float = THETA_UPPER, xtol: float = 1e-9, max_iter: int = 500
) -> LmmFit:
    mom = spec._moments
    if np.all(mom.n == 1):
        raise StatisticalDegeneracy(
            "every group has one observation; residual and intercept variance are confounded")
    dof = mom.n_obs - mom.p
    grid = np.concatenate([[0.0], np.logspace(-4, math.log10(upper), 81)])
    grid_dev = reml_deviance(grid, spec)
    if not np.all(np.isfinite(grid_dev)):
        raise StatisticalDegeneracy("REML criterion is not finite (perfect fit?)")
    k = int(np.argmin(grid_dev))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]

    def objective(th: float) -> float:
        return reml_deviance(th, spec)

    try:
        res = brent_minimize(objective, lo, hi, xtol=xtol, max_iter=max_iter)
    except ConvergenceError as exc:
        raise FitConvergenceError(str(exc), *exc.best) from exc
    theta, dev = res.x, res.fun
    if lo < theta < hi and theta > xtol:
        delta = max(10 * xtol, 1e-6 * theta)
        th_p = _polish(theta, max(lo, theta - delta), min(hi, theta + delta), mom)
        dev_p = objective(th_p)
        if dev_p <= dev:
            theta, dev = th_p, dev_p
    theta, dev = float(theta), float(dev)
    dev0 = float(grid_dev[0])
    boundary = dev0 <= dev
    if boundary:
        theta, dev = 0.0, dev0
    lam = theta * theta
    M = mom.cross(lam)
    p = mom.p
    A, b = M[:p, :p], M[:p, p]
    beta = np.linalg.solve(A, b)
    r = float(M[p, p] - b @ beta)
    if r <= 0:
        raise StatisticalDegeneracy("zero residual variance")
    beta[0] += mom.y_shift
    sigma2 = r / dof
    tau00 = float(lam * sigma2)
    cov = sigma2 * np.linalg.inv(A)
    se = np.sqrt(np.diag(cov))
    fit = LmmFit(
        names=spec.names,
        beta=beta,
        se=se,
        df=np.full(p, float(dof)),
        t=beta / se,
        p=np.ones(p),
        ci95=np.zeros((p, 2)),
        sigma2=sigma2,
        tau00=tau00,
        icc=icc(sigma2, tau00),
        r2_marginal=0.0,
        r2_conditional=0.0,
        n_obs=mom.n_obs,
        n_groups=len(mom.n),
        reml_deviance=dev,
        theta=theta,
        converged=True,
        boundary=boundary,
        df_fallback=boundary,
        spec=spec,
    )
    fit.r2_marginal, fit.r2_conditional = nakagawa_r2(fit)
    if not boundary:
        vc_cov = _vc_covariance(fit)
        fit.df_fallback = vc_cov is None
        if vc_cov is not None:
            fit.df = np.array([satterthwaite_df(fit, row, vc_cov) for row in np.eye(p)])
    fit.p = 2.0 * sps.t.sf(np.abs(fit.t), fit.df)
    half = sps.t.ppf(0.975, fit.df) * se
    fit.ci95 = np.column_stack([beta - half, beta + half])
    assert fit.icc == fit.tau00 / (fit.tau00 + fit.sigma2)
    assert fit.r2_marginal <= fit.r2_conditional <= 1.0
    return fit
