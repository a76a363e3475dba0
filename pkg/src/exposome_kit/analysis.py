"""Study-level analyses behind the ``analyze``, ``screen`` and ``simulate`` commands."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from ._io import atomic_write_bytes, atomic_write_text
from .data import (GroundTruth, SimulationConfig, StudyDataset, derive_affect, simulate_study,
                   write_dataset)
from .rater import (GREENNESS_FEATURES, INSIDE_OUTSIDE, AggregatedRating, composite_scores,
                    cross_model_agreement, scores_by_feature)
from .report import (ModelBlock, bar_chart, correlations_csv, correlations_markdown, models_csv,
                     models_markdown, scatter, screening_csv, screening_markdown, stacked_bars)
from .stats.correlation import Correlation, cronbach_alpha, pearson
from .stats.design import PREDICTOR_SETS, model_spec, trait_vs_pss
from .stats.lmm import StatisticalDegeneracy, fit_random_intercept
from .stats.reliability import ReliabilityResult, multilevel_reliability
from .stats.screening import OUTCOMES, ScreeningSummary, screen_features

AVERAGE = "average score"
INDICATORS = GREENNESS_FEATURES + (AVERAGE, INSIDE_OUTSIDE)


def indicator_scores(aggregates: Iterable[AggregatedRating], model: str) -> dict[str, dict[str, float]]:
    """Photo-level scores per indicator, including the four-feature composite."""
    per_feature = scores_by_feature(aggregates, model)
    out = {f: per_feature[f] for f in INDICATORS if f in per_feature}
    if all(f in per_feature for f in GREENNESS_FEATURES):
        out[AVERAGE] = composite_scores(per_feature)
    return {k: out[k] for k in INDICATORS if k in out}


def affect_item_array(dataset: StudyDataset, which: str) -> np.ndarray:
    """persons x occasions x items array of PA (``"pa"``) or NA items, NaN-padded."""
    sl = slice(0, 5) if which == "pa" else slice(5, 10)
    by_person: dict[str, list] = {}
    for o in sorted(dataset.eligible_observations(), key=lambda o: (o.participant_id, o.alarm_time)):
        by_person.setdefault(o.participant_id, []).append(
            [math.nan if v is None else v for v in o.affect_items[sl]])
    if not by_person:
        return np.empty((0, 0, 5))
    t = max(len(v) for v in by_person.values())
    arr = np.full((len(by_person), t, 5), math.nan)
    for i, pid in enumerate(sorted(by_person)):
        rows = by_person[pid]
        arr[i, : len(rows)] = rows
    return arr


def pss_alpha(dataset: StudyDataset) -> float:
    items = np.array([[math.nan if v is None else v for v in b.pss_items]
                      for b in sorted(dataset.baselines, key=lambda b: b.participant_id)], float)
    return cronbach_alpha(items) if len(items) >= 2 else math.nan


@dataclass
class AnalysisResult:
    blocks: list[ModelBlock]
    trait_pss: list[tuple[str, Correlation]]
    agreement: list[tuple[str, Correlation]] = field(default_factory=list)
    agreement_pairs: dict[str, tuple[list[float], list[float]]] = field(default_factory=dict)
    reliability: dict[str, ReliabilityResult] = field(default_factory=dict)
    alpha_pss: float = math.nan
    affect_means: dict[str, float] = field(default_factory=dict)


def analyze(dataset: StudyDataset, aggregates: Sequence[AggregatedRating], model_a: str,
            model_b: str | None = None, *, center_trait: bool = False) -> AnalysisResult:
    participants = {o.participant_id for o in dataset.eligible_observations()}
    if len(participants) < 2:
        raise StatisticalDegeneracy(f"{len(participants)} eligible participant(s); need at least 2")
    scores = indicator_scores(aggregates, model_a)
    if not scores:
        raise ValueError(f"no aggregates for model {model_a!r}")
    blocks, trait_pss = [], []
    for ind, by_photo in scores.items():
        for pset in PREDICTOR_SETS:
            spec = model_spec(dataset, by_photo, pset, center_trait=center_trait)
            blocks.append(ModelBlock(ind, PREDICTOR_SETS[pset], fit_random_intercept(spec)))
        x, y, _ = trait_vs_pss(dataset, by_photo)
        trait_pss.append((ind, pearson(x, y)))
    res = AnalysisResult(blocks, trait_pss)
    if model_b is not None:
        scores_b = indicator_scores(aggregates, model_b)
        for ind in scores:
            if ind in scores_b and ind != AVERAGE:
                a, b = scores[ind], scores_b[ind]
                common = sorted(set(a) & set(b))
                res.agreement.append((ind, cross_model_agreement(a, b)))
                res.agreement_pairs[ind] = ([a[p] for p in common], [b[p] for p in common])
    for which, label in (("pa", "positive_affect"), ("na", "negative_affect")):
        arr = affect_item_array(dataset, which)
        if arr.shape[0] >= 2 and arr.shape[1] >= 2:
            res.reliability[label] = multilevel_reliability(arr)
    res.alpha_pss = pss_alpha(dataset)
    pa, na = zip(*(derive_affect(o) for o in dataset.eligible_observations()))
    for label, vals in (("positive_affect", pa), ("negative_affect", na)):
        v = [x for x in vals if x is not None]
        res.affect_means[label] = math.fsum(v) / len(v) if v else math.nan
    return res


def _stars(c: Correlation) -> str:
    if not c.defined:
        return ""
    return "***" if c.p < 0.001 else "**" if c.p < 0.01 else "*" if c.p < 0.05 else ""


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in text.lower()).strip("_")


def write_analysis(res: AnalysisResult, out_dir: Path, palette: Sequence[str]) -> list[Path]:
    out_dir = Path(out_dir)
    files = {
        "models.md": models_markdown(res.blocks),
        "models.csv": models_csv(res.blocks),
        "trait_pss.md": correlations_markdown("Trait indicator vs perceived stress", res.trait_pss),
        "trait_pss.csv": correlations_csv(res.trait_pss),
        "fig_trait_pss.svg": bar_chart(
            [n for n, _ in res.trait_pss], [c.r if c.defined else 0.0 for _, c in res.trait_pss],
            "Trait indicator vs perceived stress", "Pearson r", palette[0],
            [_stars(c) for _, c in res.trait_pss]),
    }
    if res.agreement:
        files["agreement.md"] = correlations_markdown("Cross-model agreement", res.agreement)
        files["agreement.csv"] = correlations_csv(res.agreement)
        for ind, (a, b) in res.agreement_pairs.items():
            files[f"fig_agreement_{_slug(ind)}.svg"] = scatter(
                a, b, f"{ind}: model A vs model B", "model A", "model B", palette[0])
    summary = {
        "alpha_pss": res.alpha_pss,
        "affect_means": res.affect_means,
        "reliability": {
            k: {"r_cn": r.r_cn, "r_krn": r.r_krn, "n_persons": r.n_persons, "n_times": r.n_times,
                "n_items": r.n_items, "missing_fraction": r.missing_fraction, "notes": list(r.notes)}
            for k, r in res.reliability.items()},
    }
    files["summary.json"] = json.dumps(summary, indent=1, sort_keys=True, allow_nan=True) + "\n"
    paths = []
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
        paths.append(out_dir / name)
    return paths


# -- screening --------------------------------------------------------------------


def load_catalog(path) -> list[dict]:
    entries = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(entries, list):
        raise ValueError(f"{path}: expected a JSON array of effects")
    if not entries:
        raise ValueError(f"{path}: catalog is empty")
    return entries


def catalog_features(entries: Iterable[Mapping]) -> list[str]:
    from .stats.screening import normalize_label

    return sorted({normalize_label(e["category"]) for e in entries})


def catalog_counts(entries: Iterable[Mapping]) -> list[tuple[str, int, int]]:
    entries = list(entries)
    return [(o, sum(e["outcome"] == o and e["direction"] == "increase" for e in entries),
             sum(e["outcome"] == o and e["direction"] == "decrease" for e in entries))
            for o in OUTCOMES]


def screen(dataset: StudyDataset, aggregates: Sequence[AggregatedRating], model: str,
           catalog: Sequence[Mapping], jobs: int = 1) -> ScreeningSummary:
    return screen_features(dataset, scores_by_feature(aggregates, model), catalog, jobs=jobs)


def write_screening(summary: ScreeningSummary, catalog: Sequence[Mapping], out_dir: Path,
                    palette: Sequence[str]) -> list[Path]:
    cells = [c for c in summary.cells() if "all" not in (c.outcome, c.direction)]
    groups = [f"{c.outcome} {c.direction} ({c.level})" for c in cells]
    files = {
        "screening.csv": screening_csv(summary),
        "screening.md": screening_markdown(summary, catalog_counts(catalog)),
        "fig_screening.svg": stacked_bars(
            groups,
            [("expected effect found", palette[0], [c.n_hit for c in cells]),
             ("not found", palette[1], [c.n_tested - c.n_hit for c in cells])],
            "Literature effects replicated in the study data", "effects"),
    }
    paths = []
    for name, text in files.items():
        atomic_write_text(Path(out_dir) / name, text)
        paths.append(Path(out_dir) / name)
    return paths


# -- simulation ---------------------------------------------------------------------


PHOTO_SIDE = 20


def outcome_photo(fraction: float) -> bytes:
    """Small PNG whose share of green pixels is ``fraction``."""
    import io

    n = PHOTO_SIDE * PHOTO_SIDE
    k = int(round(min(max(fraction, 0.0), 1.0) * n))
    pixels = [(40, 160, 60)] * k + [(128, 128, 128)] * (n - k)
    im = Image.new("RGB", (PHOTO_SIDE, PHOTO_SIDE))
    im.putdata(pixels)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def write_simulated_photos(truth: GroundTruth, directory: Path) -> int:
    """One photo per simulated alarm, greener where the planted outcome is higher."""
    y = truth.outcome_by_photo()
    if not y:
        return 0
    vals = np.array(list(y.values()))
    lo, hi = np.quantile(vals, [0.01, 0.99])
    span = hi - lo if hi > lo else 1.0
    for pid, v in sorted(y.items()):
        atomic_write_bytes(Path(directory) / f"{pid}.png", outcome_photo((v - lo) / span))
    return len(y)


def simulate(config: SimulationConfig, ema_path: Path, baseline_path: Path,
             photo_dir: Path | None, truth_path: Path) -> GroundTruth:
    dataset, truth = simulate_study(config)
    write_dataset(dataset, ema_path, baseline_path)
    if photo_dir is not None:
        write_simulated_photos(truth, photo_dir)
    atomic_write_text(truth_path, json.dumps({
        "design": config.design, "seed": config.seed, "n_participants": config.n_participants,
        "tau00": config.tau00, "sigma2": config.sigma2,
        "beta": dict(zip(truth.names, config.beta)),
    }, indent=1, sort_keys=True) + "\n")
    return truth
