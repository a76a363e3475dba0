import json

import httpx
import pytest

from conftest import FAST_RETRY, make_pipeline_ctx
from exposome_kit.gateway import Gateway
from exposome_kit.pipeline import (DATASETS, Condenser, ExtractedFinding, ExtractionError,
                                   LiteratureEffect, MissingCheckpointError, Prompts, Vocabulary,
                                   assemble_effects, cluster, extract_findings, merge_unique,
                                   parse_step, partition, run_command, run_steps)
from exposome_kit.stub import completion_body

VOCAB = Vocabulary.load()
PROMPTS = Prompts()


class Counting:
    """Stub transport that counts calls per task."""

    def __init__(self):
        from exposome_kit.stub import handle

        self.handle = handle
        self.calls = []

    def __call__(self, request):
        self.calls.append(json.loads(request.content)["messages"][1]["content"])
        return self.handle(request)


@pytest.fixture
def counting():
    c = Counting()
    with Gateway(transport=httpx.MockTransport(c), retry=FAST_RETRY) as gw:
        yield gw, c


def test_extraction_example(stub_gateway, profile):
    text = ("Method.\nFINDING: walking in the park | positive affect | increase\n"
            "FINDING: street lights | stress | unchanged\n"
            "FINDING: loud bars | mood | increase\n")
    found, dropped = extract_findings(stub_gateway, profile, "42", text, VOCAB, PROMPTS)
    assert found == [
        ExtractedFinding("42", "walking in the park", "positive_affect", "increase",
                         "FINDING: walking in the park | positive affect | increase"),
        ExtractedFinding("42", "street lights", "stress", "null",
                         "FINDING: street lights | stress | unchanged"),
    ]
    assert dropped == 1


def test_extraction_empty_and_invalid(stub_gateway, profile):
    assert extract_findings(stub_gateway, profile, "1", "Nothing here.", VOCAB, PROMPTS) == ([], 0)
    with pytest.raises(ExtractionError):
        extract_findings(stub_gateway, profile, "1", "STUB-INVALID", VOCAB, PROMPTS)
    with pytest.raises(ExtractionError):
        extract_findings(stub_gateway, profile, "1", "   ", VOCAB, PROMPTS)


@pytest.mark.parametrize("text, expected", [
    ("Positive Affect", "positive_affect"), ("NA", "negative_affect"),
    ("perceived stress", "stress"), ("sleep", None)])
def test_vocabulary_outcomes(text, expected):
    assert VOCAB.map_outcome(text) == expected


@pytest.mark.parametrize("text, expected", [
    ("increased", "increase"), ("Lower", "decrease"), ("unchanged", "null"), ("maybe", None)])
def test_vocabulary_directions(text, expected):
    assert VOCAB.map_direction(text) == expected


def test_condense_memoizes(counting, profile):
    gw, c = counting
    condense = Condenser(gw, profile, PROMPTS)
    assert condense("Walking In The Urban Forest").category == "urban forest"
    condense("Walking In The Urban Forest")
    assert len(c.calls) == 1


def test_condense_overlong_label_is_missing(profile):
    gw = Gateway(transport=httpx.MockTransport(
        lambda r: httpx.Response(200, json=completion_body('{"category": "big urban forest"}'))),
        retry=FAST_RETRY)
    assert Condenser(gw, profile, PROMPTS)("x").category is None


def test_condense_nonresponse(stub_gateway, profile):
    assert Condenser(stub_gateway, profile, PROMPTS)("a nonresponse item").category is None


def test_partition_laws():
    rows = [{"outcome": o, "direction": d, "epmc_id": str(i)}
            for i, (o, d) in enumerate([("stress", "increase"), ("stress", "null"),
                                        ("positive_affect", "decrease"), ("stress", "increase")])]
    parts = partition(rows)
    assert set(parts) == set(DATASETS)
    assert sum(len(v) for v in parts.values()) == len(rows)
    assert [r["epmc_id"] for r in parts["stress_increase"]] == ["0", "3"]
    assert parts["null"][0]["dataset"] == "null"


def test_cluster_merges_synonyms(stub_gateway, profile):
    m = cluster(stub_gateway, profile, PROMPTS, ["urban forest", "urban woodland", "green space"])
    # the shortest member names the cluster when the shared head word is not itself a label
    assert m == {"urban forest": "urban forest", "urban woodland": "urban forest",
                 "green space": "green space"}


def test_cluster_missing_label_stays_singleton(stub_gateway, profile):
    m = cluster(stub_gateway, profile, PROMPTS, ["orphan lake", "urban forest", "city forest"])
    assert m["orphan lake"] == "orphan lake"
    assert m["urban forest"] == m["city forest"] == "city forest"


def test_cluster_single_label_needs_no_call(counting, profile):
    gw, c = counting
    assert cluster(gw, profile, PROMPTS, ["lonely"]) == {"lonely": "lonely"}
    assert c.calls == []


def _groups(m):
    return sorted(sorted(k for k in m if m[k] == v) for v in set(m.values()))


def test_cluster_across_batches(stub_gateway, profile):
    labels = ["a forest", "b woods", "c forest", "d park", "e woodland", "f park", "g park"]
    whole = cluster(stub_gateway, profile, PROMPTS, labels, batch_size=100)
    assert len(_groups(whole)) == 2
    assert _groups(cluster(stub_gateway, profile, PROMPTS, labels, batch_size=4)) == _groups(whole)
    # with very small batches some matches never share a batch, but nothing is wrongly merged
    tiny = cluster(stub_gateway, profile, PROMPTS, labels, batch_size=2)
    assert all(any(set(g) <= set(w) for w in _groups(whole)) for g in _groups(tiny))
    assert len(_groups(tiny)) < len(labels)


def test_assemble_min_studies_and_duplicates():
    rows = ([{"cluster": "forest", "outcome": "stress", "direction": "decrease", "epmc_id": p}
             for p in ("1", "1", "2", "3")]
            + [{"cluster": "lake", "outcome": "stress", "direction": "decrease", "epmc_id": p}
               for p in ("4", "5")]
            + [{"cluster": "lamp", "outcome": "stress", "direction": "null", "epmc_id": p}
               for p in ("6", "7", "8")])
    assert assemble_effects(rows) == [
        LiteratureEffect("forest", "stress", "decrease", 3, ("1", "2", "3"))]


def test_effect_count_must_match_pubs():
    with pytest.raises(ValueError):
        LiteratureEffect("x", "stress", "increase", 2, ("1", "1"))


def test_merge_unique_case_insensitive():
    effects = [LiteratureEffect("Forest", "stress", "decrease", 3, ("1", "2", "3")),
               LiteratureEffect("forest", "positive_affect", "increase", 4, ("1", "2", "3", "4"))]
    (u,) = merge_unique(effects)
    assert u.category == "forest" and len(u.effects) == 2


@pytest.mark.parametrize("text, step", [("step1", 1), ("STEP6", 6), ("3", 3)])
def test_parse_step(text, step):
    assert parse_step(text) == step


@pytest.mark.parametrize("text", ["step0", "step7", "extract", ""])
def test_parse_step_rejects(text):
    with pytest.raises(ValueError):
        parse_step(text)


def test_full_pipeline_ledger(tmp_path, stub_gateway, profile):
    ctx = make_pipeline_ctx(tmp_path, stub_gateway, profile)
    rows = run_steps(ctx, 1, 6)
    assert [(r["input"], r["output"]) for r in rows] == [
        (50, 50), (50, 34), (11, 10), (31, 31), (11, 10), (9, 7)]
    assert rows[3]["datasets"] == {"positive_affect_increase": 10, "positive_affect_decrease": 0,
                                   "negative_affect_increase": 4, "negative_affect_decrease": 3,
                                   "stress_increase": 4, "stress_decrease": 6, "null": 4}
    assert rows[4]["non_null"] == 9 and rows[5]["unique_categories"] == 5
    effects = json.loads((ctx.out_dir / "effects.json").read_text())
    assert {(e["category"], e["outcome"], e["direction"], e["study_count"]) for e in effects} == {
        ("green space", "negative_affect", "decrease", 3),
        ("traffic noise", "negative_affect", "increase", 3),
        ("green space", "positive_affect", "increase", 3),
        ("urban forest", "positive_affect", "increase", 4),
        ("bird song", "stress", "decrease", 3),
        ("orphan lake", "stress", "decrease", 3),
        ("traffic noise", "stress", "increase", 4),
    }
    ledger = [json.loads(x) for x in (ctx.out_dir / "ledger.jsonl").read_text().splitlines()]
    assert [r["step"] for r in ledger] == [1, 2, 3, 4, 5, 6]


def test_replay_from_checkpoint_is_byte_identical(tmp_path, stub_gateway, profile):
    ctx = make_pipeline_ctx(tmp_path, stub_gateway, profile)
    run_steps(ctx, 1, 6)
    before = {p.name: p.read_bytes() for p in ctx.checkpoint_dir.iterdir()}
    stamps = {n: ctx.checkpoint(i).stat().st_mtime_ns for i, n in ((1, "a"), (2, "b"))}
    assert [r["step"] for r in run_command(ctx, "condense", "step3")] == [3]
    run_command(ctx, "cluster")
    run_command(ctx, "assemble")
    after = {p.name: p.read_bytes() for p in ctx.checkpoint_dir.iterdir()}
    assert after == before
    assert {n: ctx.checkpoint(i).stat().st_mtime_ns for i, n in ((1, "a"), (2, "b"))} == stamps


def test_parallel_run_matches_serial(tmp_path, stub_gateway, profile):
    serial = make_pipeline_ctx(tmp_path / "s", stub_gateway, profile)
    parallel = make_pipeline_ctx(tmp_path / "p", stub_gateway, profile, jobs=4)
    run_steps(serial, 1, 6)
    run_steps(parallel, 1, 6)
    for step in range(1, 7):
        assert serial.checkpoint(step).read_bytes() == parallel.checkpoint(step).read_bytes()


def test_missing_checkpoint(tmp_path, stub_gateway, profile):
    ctx = make_pipeline_ctx(tmp_path, stub_gateway, profile)
    with pytest.raises(MissingCheckpointError, match="step2"):
        run_command(ctx, "condense")
    with pytest.raises(ValueError):
        run_command(ctx, "mine", "step3")
