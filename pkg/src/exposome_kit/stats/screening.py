"""Screen literature-derived features against affect and stress.

A feature "hits" when its coefficient (or correlation) reaches p < 0.05 and
its sign matches the direction reported in the literature.
Hit rates are benchmarked against a 5% chance rate with an exact binomial tail.
"""
from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from ..data import StudyDataset
from .correlation import binomial_exceedance, pearson
from .design import model_spec, trait_vs_pss
from .lmm import FitConvergenceError, LmmSpec, StatisticalDegeneracy, fit_random_intercept

OUTCOMES = ("positive_affect", "negative_affect", "stress")
DIRECTIONS = ("increase", "decrease")
LEVELS = ("state", "trait")
CHANCE_RATE = 0.05


def normalize_label(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().casefold()


@dataclass(frozen=True)
class ScreeningRow:
    feature: str
    outcome: str
    level: str
    estimate: float
    p: float
    expected_direction: str
    exact_fit: bool = False

    @property
    def significant(self) -> bool:
        return self.p < 0.05

    @property
    def matched(self) -> bool:
        sign = 1.0 if self.expected_direction == "increase" else -1.0
        return self.estimate * sign > 0

    @property
    def hit(self) -> bool:
        return self.significant and self.matched


@dataclass(frozen=True)
class CellSummary:
    outcome: str
    direction: str
    level: str
    n_tested: int
    n_hit: int
    n_significant: int

    @property
    def hit_rate(self) -> float:
        return self.n_hit / self.n_tested if self.n_tested else math.nan

    @property
    def exceedance_p(self) -> float:
        return binomial_exceedance(self.n_hit, self.n_tested, CHANCE_RATE) if self.n_tested else math.nan


@dataclass
class ScreeningSummary:
    rows: list[ScreeningRow]
    excluded: dict[str, str] = field(default_factory=dict)

    @property
    def n_tested(self) -> int:
        return len(self.rows)

    @property
    def n_hit(self) -> int:
        return sum(r.hit for r in self.rows)

    @property
    def n_significant(self) -> int:
        return sum(r.significant for r in self.rows)

    @property
    def hit_rate(self) -> float:
        return self.n_hit / self.n_tested if self.rows else math.nan

    @property
    def binomial_p(self) -> float:
        return binomial_exceedance(self.n_hit, self.n_tested, CHANCE_RATE) if self.rows else math.nan

    def subset(self, *, outcome=None, direction=None, level=None) -> list[ScreeningRow]:
        return [
            r
            for r in self.rows
            if (outcome is None or r.outcome == outcome)
            and (direction is None or r.expected_direction == direction)
            and (level is None or r.level == level)
        ]

    def cell(self, outcome=None, direction=None, level=None) -> CellSummary:
        rows = self.subset(outcome=outcome, direction=direction, level=level)
        return CellSummary(
            outcome or "all", direction or "all", level or "all",
            len(rows), sum(r.hit for r in rows), sum(r.significant for r in rows),
        )

    def cells(self) -> list[CellSummary]:
        out = []
        for level in LEVELS:
            for outcome in OUTCOMES:
                for direction in DIRECTIONS:
                    c = self.cell(outcome, direction, level)
                    if c.n_tested:
                        out.append(c)
            out.append(self.cell(level=level))
        out.append(self.cell())
        return out


def _catalog_entries(catalog: Iterable[Any]) -> list[tuple[str, str, str]]:
    out = []
    for e in catalog:
        get = e.get if isinstance(e, Mapping) else lambda k, _e=e: getattr(_e, k)
        outcome, direction = get("outcome"), get("direction")
        if outcome not in OUTCOMES or direction not in DIRECTIONS:
            raise ValueError(f"catalog entry with outcome={outcome!r}, direction={direction!r}")
        out.append((get("category"), outcome, direction))
    return out


@dataclass
class _FeatureResult:
    coefs: dict[str, tuple[float, float]] | None = None
    fit_error: str = ""
    exact: bool = False
    stress_r: float = math.nan
    stress_p: float = math.nan
    stress_error: str = ""


def _exact_fit(spec: LmmSpec) -> dict[str, tuple[float, float]] | None:
    """Coefficients of a design that reproduces the outcome without error.

    A zero-residual fit is the limit of an infinitely precise estimate:
    nonzero coefficients get p = 0, numerically null ones p = 1.
    """
    beta, *_ = np.linalg.lstsq(spec.X, spec.y, rcond=None)
    resid = spec.y - spec.X @ beta
    y_scale = float(np.std(spec.y))
    if y_scale == 0 or float(np.linalg.norm(resid)) > 1e-10 * y_scale * math.sqrt(len(resid)):
        return None
    out = {}
    for name, b, col in zip(spec.names, beta, spec.X.T):
        negligible = abs(b) * max(float(np.std(col)), 1e-300) <= 1e-9 * y_scale
        out[name] = (0.0, 1.0) if negligible else (float(b), 0.0)
    return out


def _analyse_feature(dataset: StudyDataset, scores: Mapping[str, float], need_affect: bool,
                     need_stress: bool) -> _FeatureResult:
    res = _FeatureResult()
    if need_affect:
        spec = None
        try:
            spec = model_spec(dataset, scores, "affect")
            fit = fit_random_intercept(spec)
            res.coefs = {n: (float(b), float(p)) for n, b, p in zip(fit.names, fit.beta, fit.p)}
        except (StatisticalDegeneracy, FitConvergenceError, ValueError) as exc:
            res.coefs = _exact_fit(spec) if spec is not None else None
            res.exact = res.coefs is not None
            res.fit_error = "" if res.exact else f"model: {exc}"
    if need_stress:
        x, y, _ = trait_vs_pss(dataset, scores)
        if len(x) < 3:
            res.stress_error = "fewer than 3 participants with PSS"
        else:
            c = pearson(x, y)
            if c.defined:
                res.stress_r, res.stress_p = c.r, c.p
            else:
                res.stress_error = f"correlation: {c.reason}"
    return res


def screen_features(
    dataset: StudyDataset,
    aggregates: Mapping[str, Mapping[str, float]],
    catalog: Iterable[Any],
    *,
    jobs: int = 1,
) -> ScreeningSummary:
    """Test every catalog effect on the study data.

    ``aggregates`` maps feature name -> {photo_id: aggregated score}.  Affect
    effects use one model per feature with PA and NA trait/state predictors;
    stress effects correlate participant means with PSS.
    """
    entries = _catalog_entries(catalog)
    by_name = {normalize_label(k): v for k, v in aggregates.items()}
    features = sorted({normalize_label(cat) for cat, _, _ in entries})
    excluded: dict[str, str] = {}

    todo = []
    for feat in features:
        scores = by_name.get(feat)
        if not scores:
            excluded[feat] = "no ratings"
            continue
        vals = np.array([v for v in scores.values() if v is not None and math.isfinite(v)])
        if len(vals) < 2 or np.ptp(vals) == 0:
            excluded[feat] = "zero variance"
            continue
        outs = {o for c, o, _ in entries if normalize_label(c) == feat}
        todo.append((feat, scores, bool(outs - {"stress"}), "stress" in outs))

    def run(item):
        feat, scores, need_affect, need_stress = item
        return feat, _analyse_feature(dataset, scores, need_affect, need_stress)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(run, todo))
    else:
        results = dict(map(run, todo))

    rows = []
    for cat, outcome, direction in sorted(entries, key=lambda e: (normalize_label(e[0]), e[1], e[2])):
        feat = normalize_label(cat)
        res = results.get(feat)
        if res is None:
            continue
        if outcome == "stress":
            if res.stress_error:
                excluded.setdefault(feat, res.stress_error)
                continue
            rows.append(ScreeningRow(feat, outcome, "trait", res.stress_r, res.stress_p, direction))
            continue
        if res.coefs is None:
            excluded.setdefault(feat, res.fit_error)
            continue
        for level in LEVELS:
            est, p = res.coefs[f"{outcome}_{level}"]
            rows.append(ScreeningRow(feat, outcome, level, est, p, direction, res.exact))
    return ScreeningSummary(rows, excluded)
