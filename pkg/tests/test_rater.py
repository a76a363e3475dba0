import json
import math

import httpx
import numpy as np
import pytest

from conftest import FAST_RETRY
from exposome_kit.analysis import outcome_photo
from exposome_kit.gateway import Gateway, ImagePayload, ModelProfile
from exposome_kit.rater import (AggregatedRating, CampaignPaused, RatingCampaign, RatingFailed,
                                RatingPromptSpec, RatingRecord, aggregate, aggregate_all,
                                composite_average, composite_scores, cross_model_agreement,
                                discover_photos, greenness_specs, rate_photo,
                                read_aggregates_csv, read_ratings_csv, run_means,
                                run_reliability, write_aggregates_csv, write_ratings_csv)
from exposome_kit.stub import completion_body, handle

IMAGE = ImagePayload.from_bytes(outcome_photo(0.5))
SPEC = RatingPromptSpec.default("greenness")


def scripted(*replies):
    replies = list(replies)

    def handler(request):
        r = replies.pop(0) if len(replies) > 1 else replies[0]
        return httpx.Response(200, json=completion_body(r))

    return Gateway(transport=httpx.MockTransport(handler), retry=FAST_RETRY)


def rec(score, run=1, conf=5.0, photo="p", feature="greenness", model="m"):
    return RatingRecord(photo, feature, model, run, score, conf)


def test_same_reply_five_times(profile):
    records, failures = rate_photo(scripted('{"score": 7, "confidence": 9}'), "p", IMAGE, SPEC,
                                   profile, 5)
    assert [(r.run, r.score, r.confidence) for r in records] == [(i, 7, 9) for i in range(1, 6)]
    assert failures == []
    assert aggregate(records) == AggregatedRating("p", "greenness", profile.model, 7, 9, 5)


def test_unparseable_run_is_skipped(profile):
    ok = '{"score": 4, "confidence": 6}'
    gw = scripted(ok, "nonsense", "still nonsense", ok, ok, ok)
    records, failures = rate_photo(gw, "p", IMAGE, SPEC, profile, 5)
    assert [r.run for r in records] == [1, 3, 4, 5]
    assert [f[0] for f in failures] == [2]
    assert aggregate(records).n_runs == 4


def test_all_runs_failing(profile):
    with pytest.raises(RatingFailed):
        rate_photo(scripted("no"), "p", IMAGE, SPEC, profile, 2)


def test_binary_scale_bounds(profile):
    spec = RatingPromptSpec.default("inside/outside", "binary", ("inside", "outside"))
    assert (spec.lo, spec.hi, spec.is_binary) == (1, 2, True)
    assert "from 1 (inside) to 2 (outside)" in spec.render()
    gw = scripted('{"score": 3, "confidence": 5}', '{"score": 2, "confidence": 5}')
    records, _ = rate_photo(gw, "p", IMAGE, spec, profile, 1)
    assert records[0].score == 2


def test_prompt_spec_validation():
    with pytest.raises(ValueError):
        RatingPromptSpec("x", 5, 5, "{feature}")
    with pytest.raises(ValueError):
        RatingPromptSpec("x", 1, 10, "no slot")
    names = [s.feature for s in greenness_specs()]
    assert names == ["greenness", "nature score", "plant presence", "natural light exposure",
                     "inside/outside"]


@pytest.mark.parametrize("scores, mean", [((3, 3, 3, 3, 3), 3.0), ((1, 2, 3, 4, 5), 3.0),
                                          ((2, 3), 2.5), ((0.1, 0.1, 0.1), 0.1)])
def test_aggregate_mean(scores, mean):
    g = aggregate([rec(s, run=i + 1) for i, s in enumerate(scores)])
    assert g.mean_score == mean and g.n_runs == len(scores)


def test_aggregate_rejects_mixed_groups():
    assert aggregate([]) is None
    with pytest.raises(ValueError):
        aggregate([rec(1, photo="a"), rec(2, photo="b")])


@pytest.mark.parametrize("vals, expected", [((4, 4, 4, 4), 4.0), ((1, 3, 5, 7), 4.0)])
def test_composite_average(vals, expected):
    feats = ("greenness", "nature score", "plant presence", "natural light exposure")
    assert composite_average(dict(zip(feats, vals))) == expected


def test_composite_needs_every_feature():
    assert composite_average({"greenness": 4.0}) is None
    scores = {"greenness": {"a": 1, "b": 2}, "nature score": {"a": 3, "b": 2},
              "plant presence": {"a": 5}, "natural light exposure": {"a": 7, "b": 2}}
    assert composite_scores(scores) == {"a": 4.0}


def test_cross_model_agreement_extremes():
    a = {f"p{i}": float(v) for i, v in enumerate([1, 4, 2, 9, 5])}
    assert cross_model_agreement(a, dict(a)).r == pytest.approx(1.0)
    assert cross_model_agreement(a, {k: 11 - v for k, v in a.items()}).r == pytest.approx(-1.0)
    # only photos rated by both models are paired
    b = {**{k: 2 * v for k, v in a.items()}, "extra": 100.0}
    assert cross_model_agreement(a, b).n == 5


def test_run_means_and_reliability():
    records = [rec(s + run * 0.0, run=run, photo=f"p{i}") for i, s in enumerate([1, 5, 9])
               for run in (1, 2, 3)]
    assert run_means(records, "greenness", "m") == {1: 5.0, 2: 5.0, 3: 5.0}
    assert run_reliability(records, "greenness", "m") == pytest.approx(1.0)
    assert math.isnan(run_reliability(records[:1], "greenness", "m"))


def test_csv_round_trip(tmp_path):
    records = [rec(7, 1), rec(2.5, 2), rec(3, 1, photo="a")]
    write_ratings_csv(tmp_path / "r.csv", records)
    assert sorted(read_ratings_csv(tmp_path / "r.csv"), key=lambda r: r.key) == \
        sorted(records, key=lambda r: r.key)
    aggs = aggregate_all(records)
    write_aggregates_csv(tmp_path / "a.csv", aggs)
    assert read_aggregates_csv(tmp_path / "a.csv") == aggs
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "a,greenness,m,1,3,5"


def write_photos(directory, fractions):
    directory.mkdir(parents=True, exist_ok=True)
    for name, f in fractions.items():
        (directory / f"{name}.png").write_bytes(outcome_photo(f))
    return discover_photos(directory)


def campaign(out, gateway, photos, k=5, jobs=1):
    profiles = [ModelProfile("http://s", "model-a", 0.6)]
    return RatingCampaign(out, gateway, profiles, greenness_specs(), photos, k, jobs)


def test_campaign_rows(tmp_path, stub_gateway):
    photos = write_photos(tmp_path / "photos", {"a": 0.2, "b": 0.9})
    records, aggs = campaign(tmp_path / "out", stub_gateway, photos).run()
    assert len(records) == 50 and len(aggs) == 10
    green = {g.photo_id: g.mean_score for g in aggs if g.feature == "greenness"}
    assert green["b"] > green["a"]
    assert all(g.mean_score in (1, 2) for g in aggs if g.feature == "inside/outside")


def test_campaign_resume_after_outage(tmp_path, stub_gateway):
    photos = write_photos(tmp_path / "photos", {"a": 0.2, "b": 0.9, "c": 0.5})
    ref = campaign(tmp_path / "ref", stub_gateway, photos, k=2)
    ref.run()
    calls = []

    def flaky(request):
        calls.append(1)
        if len(calls) > 12:
            raise httpx.ConnectError("outage")
        return handle(request)

    with Gateway(transport=httpx.MockTransport(flaky), retry=FAST_RETRY) as gw:
        with pytest.raises(CampaignPaused) as info:
            campaign(tmp_path / "out", gw, photos, k=2).run()
    assert info.value.done == 6 and info.value.remaining == 9
    resumed = campaign(tmp_path / "out", stub_gateway, photos, k=2)
    resumed.run()
    for name in ("ratings.csv", "aggregates.csv"):
        assert (tmp_path / "out" / name).read_bytes() == (tmp_path / "ref" / name).read_bytes()
    lines = (tmp_path / "out" / "progress.jsonl").read_text().splitlines()
    assert len(lines) == 15 and len({tuple(json.loads(x)[k] for k in ('photo_id', 'feature', 'model'))
                                  for x in lines}) == 15


def test_campaign_parallel_matches_serial(tmp_path, stub_gateway):
    photos = write_photos(tmp_path / "photos", {f"p{i}": i / 5 for i in range(5)})
    campaign(tmp_path / "s", stub_gateway, photos, k=2).run()
    campaign(tmp_path / "p", stub_gateway, photos, k=2, jobs=6).run()
    for name in ("ratings.csv", "aggregates.csv"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_discover_photos_rejects_duplicates(tmp_path):
    (tmp_path / "x.png").write_bytes(outcome_photo(0.1))
    (tmp_path / "x.jpg").write_bytes(b"")
    (tmp_path / "notes.txt").write_text("")
    with pytest.raises(ValueError):
        discover_photos(tmp_path)


def test_run_order_invariance():
    rng = np.random.default_rng(0)
    records = [rec(float(rng.integers(1, 11)), run=r, photo=f"p{i}") for i in range(4)
               for r in range(1, 6)]
    shuffled = [records[i] for i in rng.permutation(len(records))]
    assert aggregate_all(records) == aggregate_all(shuffled)
