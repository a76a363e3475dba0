"""Photograph rating through a vision-language model.

Each (photo, feature) pair is sent in its own conversation ``k`` times; the
per-run scores are averaged into one aggregate per (photo, feature, model).
Campaigns persist one progress line per finished pair and resume from it.
"""
from __future__ import annotations

import csv
import io
import math
import threading
from collections import defaultdict
from concurrent.futures import CancelledError, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import append_ndjson, atomic_write_text, load_resource, read_ndjson
from .gateway import (ChatRequest, Field, Gateway, GatewayError, ImagePayload, ModelProfile,
                      TransportError)
from .stats.correlation import Correlation, cronbach_alpha, pearson

CONTINUOUS = (1, 10)
BINARY = (1, 2)
CONFIDENCE = (1, 10)
GREENNESS_FEATURES = ("greenness", "nature score", "plant presence", "natural light exposure")
INSIDE_OUTSIDE = "inside/outside"
PHOTO_SUFFIXES = (".jpg", ".jpeg", ".png")

RATINGS_HEADER = ("photo_id", "feature", "model", "run", "score", "confidence")
AGGREGATES_HEADER = ("photo_id", "feature", "model", "mean_score", "mean_confidence", "n_runs")


class RatingFailed(GatewayError):
    """Every run for a (photo, feature) failed."""


class CampaignPaused(Exception):
    def __init__(self, done: int, remaining: int, cause: Exception):
        super().__init__(f"campaign paused after {done} pairs ({remaining} left): {cause}")
        self.done, self.remaining, self.cause = done, remaining, cause


@dataclass(frozen=True)
class RatingPromptSpec:
    feature: str
    lo: int = CONTINUOUS[0]
    hi: int = CONTINUOUS[1]
    template: str = ""
    lo_anchor: str = "not at all present"
    hi_anchor: str = "extremely present"
    system: str = ""

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"scale bounds {self.lo}..{self.hi} are not ordered")
        if self.template.count("{feature}") != 1:
            raise ValueError("template must contain exactly one {feature} slot")

    @classmethod
    def default(cls, feature: str, scale: str = "continuous",
                anchors: tuple[str, str] | None = None, prompts: Mapping | None = None):
        rate = (prompts or load_resource("prompts.json"))["rate"]
        lo, hi = BINARY if scale == "binary" else CONTINUOUS
        if anchors is None:
            anchors = tuple(rate["anchors"]["binary" if scale == "binary" else "continuous"])
        return cls(feature, lo, hi, rate["template"], anchors[0], anchors[1], rate["system"])

    @property
    def is_binary(self) -> bool:
        return (self.lo, self.hi) == BINARY

    def render(self) -> str:
        return self.template.format(feature=self.feature, lo=self.lo, hi=self.hi,
                                    lo_anchor=self.lo_anchor, hi_anchor=self.hi_anchor)

    def schema(self) -> tuple[Field, Field]:
        return (Field("score", "number", self.lo, self.hi),
                Field("confidence", "number", *CONFIDENCE))


def greenness_specs(prompts: Mapping | None = None) -> list[RatingPromptSpec]:
    specs = [RatingPromptSpec.default(f, prompts=prompts) for f in GREENNESS_FEATURES]
    specs.append(RatingPromptSpec.default(INSIDE_OUTSIDE, "binary", ("inside", "outside"), prompts))
    return specs


@dataclass(frozen=True)
class RatingRecord:
    photo_id: str
    feature: str
    model: str
    run: int
    score: float
    confidence: float

    def __post_init__(self):
        if self.run < 1:
            raise ValueError("run index starts at 1")
        if not CONFIDENCE[0] <= self.confidence <= CONFIDENCE[1]:
            raise ValueError(f"confidence {self.confidence} outside 1..10")

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.photo_id, self.feature, self.model, self.run)


@dataclass(frozen=True)
class AggregatedRating:
    photo_id: str
    feature: str
    model: str
    mean_score: float
    mean_confidence: float
    n_runs: int


def rate_photo(
    gateway: Gateway, photo_id: str, image: ImagePayload, spec: RatingPromptSpec,
    profile: ModelProfile, k: int = 5,
) -> tuple[list[RatingRecord], list[tuple[int, str]]]:
    """Up to ``k`` records plus (run, reason) for every failed run."""
    req = ChatRequest(spec.system, spec.render(), profile, image)
    records, failures = [], []
    for run, res in enumerate(gateway.run_repeated(req, k, spec.schema()), start=1):
        if res.ok:
            records.append(RatingRecord(photo_id, spec.feature, profile.model, run,
                                        res.parsed["score"], res.parsed["confidence"]))
        elif isinstance(res.error, TransportError):
            raise res.error
        else:
            failures.append((run, str(res.error)))
    if not records:
        raise RatingFailed(f"{photo_id}/{spec.feature}: all {k} runs failed")
    return records, failures


def _mean_within(values: Sequence[float]) -> float:
    m = math.fsum(values) / len(values)
    return min(max(m, min(values)), max(values))


def aggregate(records: Sequence[RatingRecord]) -> AggregatedRating | None:
    """Mean score and confidence over the successful runs of one (photo, feature, model)."""
    if not records:
        return None
    keys = {(r.photo_id, r.feature, r.model) for r in records}
    if len(keys) != 1:
        raise ValueError(f"records span {len(keys)} (photo, feature, model) groups")
    photo, feat, model = keys.pop()
    return AggregatedRating(photo, feat, model, _mean_within([r.score for r in records]),
                            _mean_within([r.confidence for r in records]), len(records))


def aggregate_all(records: Iterable[RatingRecord]) -> list[AggregatedRating]:
    groups: dict[tuple[str, str, str], list[RatingRecord]] = defaultdict(list)
    for r in records:
        groups[(r.photo_id, r.feature, r.model)].append(r)
    return [aggregate(groups[k]) for k in sorted(groups)]


def composite_average(per_feature: Mapping[str, float | None],
                      features: Sequence[str] = GREENNESS_FEATURES) -> float | None:
    vals = [per_feature.get(f) for f in features]
    if any(v is None or not math.isfinite(v) for v in vals):
        return None
    return math.fsum(vals) / len(vals)


def composite_scores(scores: Mapping[str, Mapping[str, float]],
                     features: Sequence[str] = GREENNESS_FEATURES) -> dict[str, float]:
    """photo_id -> composite, for photos rated on every feature."""
    photos = set().union(*(scores.get(f, {}).keys() for f in features)) if features else set()
    out = {}
    for pid in sorted(photos):
        v = composite_average({f: scores.get(f, {}).get(pid) for f in features}, features)
        if v is not None:
            out[pid] = v
    return out


def cross_model_agreement(a: Mapping[str, float], b: Mapping[str, float]) -> Correlation:
    """Pearson r between two models' photo-level aggregates of one feature."""
    common = sorted(set(a) & set(b))
    return pearson(np.array([a[p] for p in common], float), np.array([b[p] for p in common], float))


def dataset_mean(aggregates: Iterable[AggregatedRating], feature: str, model: str) -> float:
    vals = [g.mean_score for g in aggregates if g.feature == feature and g.model == model]
    return math.fsum(vals) / len(vals) if vals else math.nan


def run_means(records: Iterable[RatingRecord], feature: str, model: str) -> dict[int, float]:
    """Dataset-level mean score of each run index."""
    by_run: dict[int, list[float]] = defaultdict(list)
    for r in records:
        if r.feature == feature and r.model == model:
            by_run[r.run].append(r.score)
    return {k: math.fsum(v) / len(v) for k, v in sorted(by_run.items())}


def run_reliability(records: Iterable[RatingRecord], feature: str, model: str) -> float:
    """Cronbach's alpha with runs as items and photos as cases."""
    table: dict[str, dict[int, float]] = defaultdict(dict)
    runs: set[int] = set()
    for r in records:
        if r.feature == feature and r.model == model:
            table[r.photo_id][r.run] = r.score
            runs.add(r.run)
    if len(runs) < 2 or len(table) < 2:
        return math.nan
    cols = sorted(runs)
    items = np.array([[table[p].get(c, math.nan) for c in cols] for p in sorted(table)])
    return cronbach_alpha(items)


# -- files ---------------------------------------------------------------------------


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_ratings_csv(path, records: Iterable[RatingRecord]) -> None:
    rows = sorted(records, key=lambda r: r.key)
    atomic_write_text(path, _csv_text(RATINGS_HEADER, (
        (r.photo_id, r.feature, r.model, r.run, _num(r.score), _num(r.confidence)) for r in rows)))


def write_aggregates_csv(path, aggregates: Iterable[AggregatedRating]) -> None:
    rows = sorted(aggregates, key=lambda g: (g.photo_id, g.feature, g.model))
    atomic_write_text(path, _csv_text(AGGREGATES_HEADER, (
        (g.photo_id, g.feature, g.model, _num(g.mean_score), _num(g.mean_confidence), g.n_runs)
        for g in rows)))


def read_ratings_csv(path) -> list[RatingRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [RatingRecord(r["photo_id"], r["feature"], r["model"], int(r["run"]),
                             float(r["score"]), float(r["confidence"]))
                for r in csv.DictReader(fh)]


def read_aggregates_csv(path) -> list[AggregatedRating]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [AggregatedRating(r["photo_id"], r["feature"], r["model"], float(r["mean_score"]),
                                 float(r["mean_confidence"]), int(r["n_runs"]))
                for r in csv.DictReader(fh)]


def scores_by_feature(aggregates: Iterable[AggregatedRating], model: str) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for g in aggregates:
        if g.model == model:
            out[g.feature][g.photo_id] = g.mean_score
    return dict(out)


def discover_photos(directory) -> dict[str, Path]:
    """photo_id -> image path for every JPEG/PNG file in ``directory``."""
    out: dict[str, Path] = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix.lower() in PHOTO_SUFFIXES:
            if p.stem in out:
                raise ValueError(f"two images for photo {p.stem!r}")
            out[p.stem] = p
    return out


# -- campaigns ------------------------------------------------------------------------


@dataclass
class RatingCampaign:
    out_dir: Path
    gateway: Gateway
    profiles: Sequence[ModelProfile]
    specs: Sequence[RatingPromptSpec]
    photos: Mapping[str, Path]
    k: int = 5
    jobs: int = 1
    max_edge: int = 1024
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        names = [s.feature for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature in campaign")

    @property
    def progress_path(self) -> Path:
        return self.out_dir / "progress.jsonl"

    def completed(self) -> dict[tuple[str, str, str], dict]:
        if not self.progress_path.exists():
            return {}
        return {(e["photo_id"], e["feature"], e["model"]): e for e in read_ndjson(self.progress_path)}

    def pairs(self) -> list[tuple[str, RatingPromptSpec, ModelProfile]]:
        return [(pid, s, prof) for pid in sorted(self.photos) for s in self.specs
                for prof in self.profiles]

    def _rate_one(self, pid: str, spec: RatingPromptSpec, prof: ModelProfile,
                  images: dict[str, ImagePayload]) -> dict:
        with self._lock:
            image = images.get(pid)
        if image is None:
            image = ImagePayload.from_path(self.photos[pid], self.max_edge)
            with self._lock:
                images[pid] = image
        try:
            records, failures = rate_photo(self.gateway, pid, image, spec, prof, self.k)
        except RatingFailed as exc:
            records, failures = [], [(0, str(exc))]
        entry = {"photo_id": pid, "feature": spec.feature, "model": prof.model,
                 "records": [[r.run, r.score, r.confidence] for r in records],
                 "failures": [list(f) for f in failures]}
        with self._lock:
            append_ndjson(self.progress_path, entry)
        return entry

    def run(self) -> tuple[list[RatingRecord], list[AggregatedRating]]:
        """Rate every pending pair, then rewrite ``ratings.csv`` and ``aggregates.csv``.

        Transport failures pause the campaign; rerunning resumes it.
        """
        done = self.completed()
        todo = [(pid, s, p) for pid, s, p in self.pairs() if (pid, s.feature, p.model) not in done]
        images: dict[str, ImagePayload] = {}
        error: Exception | None = None
        if todo:
            with ThreadPoolExecutor(max_workers=max(1, self.jobs)) as pool:
                futures = [pool.submit(self._rate_one, pid, s, p, images) for pid, s, p in todo]
                for fut in futures:
                    try:
                        fut.result()
                    except CancelledError:
                        continue
                    except TransportError as exc:
                        error = error or exc
                        for f in futures:
                            f.cancel()
        if error is not None:
            finished = len(self.completed())
            raise CampaignPaused(finished, len(self.pairs()) - finished, error)
        return self.finalize()

    def finalize(self) -> tuple[list[RatingRecord], list[AggregatedRating]]:
        records = [
            RatingRecord(pid, feat, model, run, score, conf)
            for (pid, feat, model), e in self.completed().items()
            for run, score, conf in e["records"]
        ]
        aggs = aggregate_all(records)
        write_ratings_csv(self.out_dir / "ratings.csv", records)
        write_aggregates_csv(self.out_dir / "aggregates.csv", aggs)
        return sorted(records, key=lambda r: r.key), aggs
