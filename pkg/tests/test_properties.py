"""Invariants checked over generated inputs."""
import math

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from exposome_kit.data import person_center
from exposome_kit.gateway import Field, parse_structured
from exposome_kit.pipeline import LiteratureEffect, assemble_effects, partition
from exposome_kit.rater import RatingRecord, aggregate, composite_average
from exposome_kit.stats.correlation import binomial_exceedance, pearson
from exposome_kit.stats.lmm import LmmSpec, fit_random_intercept, icc, reml_deviance
from exposome_kit.stats.reliability import multilevel_reliability

SETTINGS = settings(max_examples=60, deadline=None, derandomize=True,
                    suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def grouped_data(draw, p_max=3):
    sizes = draw(st.lists(st.integers(1, 6), min_size=3, max_size=10))
    assume(max(sizes) > 1)
    groups = np.repeat(np.arange(len(sizes)), sizes)
    n = len(groups)
    p = draw(st.integers(1, p_max))
    assume(n > p + 1)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) + rng.normal(0, draw(st.floats(0, 3)), len(sizes))[groups] \
        + rng.normal(size=n)
    return y, X, groups


@SETTINGS
@given(grouped_data(), st.floats(0, 20))
def test_deviance_equals_dense_oracle(data, theta):
    y, X, groups = data
    spec = LmmSpec(y, X, groups)
    assert math.isclose(reml_deviance(theta, spec), oracles.dense_profiled_reml(theta, y, X, groups),
                        rel_tol=1e-8, abs_tol=1e-8)


@SETTINGS
@given(grouped_data())
def test_fit_invariants(data):
    fit = fit_random_intercept(LmmSpec(*data))
    assert fit.sigma2 > 0 and fit.tau00 >= 0
    assert 0 <= fit.icc < 1 and math.isclose(fit.icc, icc(fit.sigma2, fit.tau00))
    assert 0 <= fit.r2_marginal <= fit.r2_conditional <= 1
    assert np.all(fit.df > 0) and np.all((0 <= fit.p) & (fit.p <= 1))
    # the optimum is no worse than the boundary
    assert fit.reml_deviance <= reml_deviance(0.0, LmmSpec(*data)) + 1e-9


@SETTINGS
@given(grouped_data(), st.floats(0.1, 10), finite)
def test_fit_equivariance(data, scale, shift):
    y, X, groups = data
    a = fit_random_intercept(LmmSpec(y, X, groups))
    b = fit_random_intercept(LmmSpec(scale * y + shift, X, groups))
    assert math.isclose(b.sigma2, scale**2 * a.sigma2, rel_tol=1e-4)
    assert math.isclose(b.tau00, scale**2 * a.tau00, rel_tol=1e-3, abs_tol=1e-4 * b.sigma2)
    np.testing.assert_allclose(b.beta[1:], scale * a.beta[1:], rtol=1e-4, atol=1e-6 * scale)


@SETTINGS
@given(st.floats(1e-6, 1e6), st.floats(0, 1e6))
def test_icc_range(sigma2, tau00):
    v = icc(sigma2, tau00)
    assert 0 <= v < 1
    assert math.isclose(v, tau00 / (tau00 + sigma2))


@SETTINGS
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=40))
def test_pearson_bounds_and_symmetry(pairs):
    x, y = map(np.array, zip(*pairs))
    c = pearson(x, y)
    if c.defined:
        assert -1 <= c.r <= 1 and 0 <= c.p <= 1
        assert math.isclose(pearson(y, x).r, c.r, abs_tol=1e-12)


@SETTINGS
@given(st.integers(1, 300), st.data())
def test_binomial_tail_monotone(n, data):
    k = data.draw(st.integers(0, n))
    p = binomial_exceedance(k, n)
    assert 0 <= p <= 1
    if k < n:
        assert binomial_exceedance(k + 1, n) <= p
    assert math.isclose(p, oracles.binomial_tail(k, n, 0.05), rel_tol=1e-7, abs_tol=1e-300)


@SETTINGS
@given(arrays(float, st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 5)),
              elements=st.floats(1, 5)))
def test_reliability_in_unit_interval(x):
    res = multilevel_reliability(x)
    for r in (res.r_cn, res.r_krn):
        assert math.isnan(r) or 0 <= r <= 1


@SETTINGS
@given(st.lists(st.tuples(st.sampled_from("abc"), st.one_of(st.none(), finite)), min_size=1))
def test_person_center_sums_to_zero(rows):
    groups, values = zip(*rows)
    c = person_center(values, groups)
    for g in c.trait:
        mask = np.array([gg == g for gg in groups]) & ~np.isnan(c.state)
        assert abs(c.state[mask].sum()) <= 1e-9 * max(1.0, np.abs(np.array(
            [v for v, gg in zip(values, groups) if gg == g and v is not None])).max())


@SETTINGS
@given(st.lists(st.floats(1, 10), min_size=1, max_size=10), st.integers(1, 10))
def test_aggregate_stays_within_run_range(scores, conf):
    records = [RatingRecord("p", "f", "m", i + 1, s, conf) for i, s in enumerate(scores)]
    g = aggregate(records)
    assert min(scores) <= g.mean_score <= max(scores)
    assert g.mean_confidence == conf and g.n_runs == len(scores)
    assert aggregate(records[::-1]) == g


@SETTINGS
@given(st.lists(st.floats(1, 10), min_size=4, max_size=4))
def test_composite_within_feature_range(vals):
    feats = ("greenness", "nature score", "plant presence", "natural light exposure")
    v = composite_average(dict(zip(feats, vals)))
    assert min(vals) - 1e-12 <= v <= max(vals) + 1e-12


OUTCOME = st.sampled_from(["positive_affect", "negative_affect", "stress"])
DIRECTION = st.sampled_from(["increase", "decrease", "null"])


@SETTINGS
@given(st.lists(st.fixed_dictionaries({
    "cluster": st.sampled_from(["a", "b", "c"]), "outcome": OUTCOME, "direction": DIRECTION,
    "epmc_id": st.integers(1, 8).map(str)}), max_size=60), st.integers(1, 4))
def test_assemble_counts_distinct_publications(rows, min_studies):
    effects = assemble_effects(rows, min_studies)
    for e in effects:
        pubs = {r["epmc_id"] for r in rows if (r["cluster"], r["outcome"], r["direction"])
                == (e.category, e.outcome, e.direction)}
        assert e.study_count == len(pubs) >= min_studies and e.direction != "null"
    assert all(isinstance(e, LiteratureEffect) for e in effects)


@SETTINGS
@given(st.lists(st.fixed_dictionaries({"outcome": OUTCOME, "direction": DIRECTION}), max_size=40))
def test_partition_is_a_partition(rows):
    parts = partition(rows)
    assert sum(map(len, parts.values())) == len(rows)
    assert len(parts["null"]) == sum(r["direction"] == "null" for r in rows)


@SETTINGS
@given(st.integers(-5, 15), st.integers(-5, 15))
def test_structured_output_respects_bounds(score, conf):
    schema = (Field("score", "number", 1, 10), Field("confidence", "number", 1, 10))
    rec, diag = parse_structured(f'{{"score": {score}, "confidence": {conf}}}', schema)
    ok = 1 <= score <= 10 and 1 <= conf <= 10
    assert (rec is not None) == ok and (diag == "") == ok
