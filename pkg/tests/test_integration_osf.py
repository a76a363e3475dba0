"""Reproduction of the published study values from the OSF download.

Set ``EXPOSOME_OSF_DIR`` to a directory holding ``ema.csv``, ``baseline.csv``
and ``aggregates.csv`` (the published per-photo ratings in this package's
aggregate format). ``EXPOSOME_OSF_MODEL_A``/``_B`` select the rater models;
by default the two model names in the aggregates are used in sorted order.
"""
import math
import os
from pathlib import Path

import pytest

from exposome_kit.analysis import AVERAGE, analyze, indicator_scores
from exposome_kit.data import load_dataset
from exposome_kit.rater import read_aggregates_csv

OSF = os.environ.get("EXPOSOME_OSF_DIR")
pytestmark = [pytest.mark.integration,
              pytest.mark.skipif(not OSF, reason="EXPOSOME_OSF_DIR not set")]


@pytest.fixture(scope="module")
def study():
    root = Path(OSF)
    dataset = load_dataset(root / "ema.csv", root / "baseline.csv")
    aggs = read_aggregates_csv(root / "aggregates.csv")
    models = sorted({g.model for g in aggs})
    a = os.environ.get("EXPOSOME_OSF_MODEL_A", models[0])
    b = os.environ.get("EXPOSOME_OSF_MODEL_B", models[1] if len(models) > 1 else None)
    return dataset, aggs, analyze(dataset, aggs, a, b), a


def block(res, indicator, predictor_set):
    return next(b.fit for b in res.blocks if b.indicator == indicator and b.predictor_set == predictor_set)


def coef(fit, suffix):
    return next(i for i, n in enumerate(fit.names) if n.endswith(suffix))


@pytest.mark.parametrize("indicator,set_name,sigma2,tau00,icc", [
    ("greenness", "Subjective greenness", 3.59, 0.76, 0.17),
    (AVERAGE, "Subjective greenness", 3.04, 0.72, 0.19),
    ("greenness", "Positive and negative affect", 6.35, 1.47, 0.19),
])
def test_variance_components(study, indicator, set_name, sigma2, tau00, icc):
    fit = block(study[2], indicator, set_name)
    assert fit.sigma2 == pytest.approx(sigma2, abs=0.01)
    assert fit.tau00 == pytest.approx(tau00, abs=0.01)
    assert round(fit.icc, 2) == icc


def test_greenness_model(study):
    fit = block(study[2], "greenness", "Subjective greenness")
    assert (fit.n_groups, fit.n_obs) == (106, 2674)
    assert fit.beta[coef(fit, "_state")] == pytest.approx(1.26, abs=0.01)
    assert fit.beta[coef(fit, "_trait")] == pytest.approx(1.28, abs=0.01)
    assert fit.df[coef(fit, "_state")] == pytest.approx(2571.73, rel=0.05)
    assert (round(fit.r2_marginal, 3), round(fit.r2_conditional, 3)) == (0.453, 0.549)


def test_descriptives(study):
    res = study[2]
    assert res.affect_means["positive_affect"] == pytest.approx(2.89, abs=0.01)
    assert res.affect_means["negative_affect"] == pytest.approx(1.31, abs=0.01)
    assert res.alpha_pss == pytest.approx(0.88, abs=0.01)
    r = dict(res.trait_pss)["greenness"]
    assert r.r == pytest.approx(-0.21, abs=0.01)
    assert r.p == pytest.approx(0.031, abs=0.002)


def test_cross_model_agreement(study):
    agreement = dict(study[2].agreement)
    if not agreement:
        pytest.skip("only one rater model in the aggregates")
    for ind in ("greenness", "nature score", "plant presence"):
        assert 0.83 - 0.005 <= agreement[ind].r <= 0.89 + 0.005


def test_every_indicator_has_scores(study):
    scores = indicator_scores(study[1], study[3])
    assert all(math.isfinite(v) for by_photo in scores.values() for v in by_photo.values())
