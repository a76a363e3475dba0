"""Six-step literature pipeline from a keyword search to a catalog of effects.

Steps and their checkpoints (newline-delimited JSON under ``checkpoints/``):

1. mine       search hits                        step1_records.ndjson
2. extract    findings per publication           step2_findings.ndjson
3. condense   one/two-word label per phrase      step3_condensed.ndjson
4. partition  seven direction x outcome datasets step4_partition.ndjson
5. cluster    category -> cluster per dataset    step5_clusters.ndjson
6. assemble   effects backed by >= 3 studies     step6_effects.ndjson

Each step reads only the previous checkpoint, so any step can be rerun
after hand-editing its input.  Every step appends one row to ``ledger.jsonl``.
"""
from __future__ import annotations

import json
import logging
import re
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from ._io import append_ndjson, atomic_write_text, load_resource, read_ndjson, write_ndjson
from .epmc import EpmcClient, EpmcError, PubRecord
from .gateway import (ChatRequest, Field, Gateway, ModelProfile, StructuredOutputError)

log = logging.getLogger(__name__)

OUTCOMES = ("positive_affect", "negative_affect", "stress")
DIRECTIONS = ("increase", "decrease", "null")
DATASETS = tuple(f"{o}_{d}" for o in OUTCOMES for d in ("increase", "decrease")) + ("null",)
MIN_STUDIES = 3
CLUSTER_BATCH = 200

STEPS = ("mine", "extract", "condense", "partition", "cluster", "assemble")
CHECKPOINTS = {
    1: "step1_records.ndjson",
    2: "step2_findings.ndjson",
    3: "step3_condensed.ndjson",
    4: "step4_partition.ndjson",
    5: "step5_clusters.ndjson",
    6: "step6_effects.ndjson",
}


class PipelineError(Exception):
    pass


class MissingCheckpointError(PipelineError):
    def __init__(self, path: Path):
        super().__init__(f"missing checkpoint {path}; run the preceding step first")
        self.path = path


class ExtractionError(PipelineError):
    def __init__(self, epmc_id: str, cause: Exception):
        super().__init__(f"{epmc_id}: {cause}")
        self.epmc_id = epmc_id
        self.cause = cause


def normalize_label(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().casefold()


@dataclass(frozen=True)
class Vocabulary:
    outcome: Mapping[str, str]
    direction: Mapping[str, str]

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocabulary":
        data = json.loads(Path(path).read_text("utf-8")) if path else load_resource("vocabulary.json")
        return cls(data["outcome"], data["direction"])

    @staticmethod
    def _key(text: str) -> str:
        return normalize_label(re.sub(r"[_\-]", " ", text))

    def map_outcome(self, text: str) -> str | None:
        key = self._key(text)
        return self.outcome.get(key) or (key.replace(" ", "_") if key.replace(" ", "_") in OUTCOMES else None)

    def map_direction(self, text: str) -> str | None:
        key = self._key(text)
        return self.direction.get(key) or (key if key in DIRECTIONS else None)


@dataclass(frozen=True)
class ExtractedFinding:
    epmc_id: str
    context_phrase: str
    outcome: str
    direction: str
    evidence: str = ""

    def __post_init__(self):
        if not self.epmc_id:
            raise ValueError("epmc_id must be non-empty")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome {self.outcome!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction {self.direction!r}")


@dataclass(frozen=True)
class CondensedCategory:
    phrase: str
    category: str | None

    def __post_init__(self):
        if self.category is not None and not 1 <= len(self.category.split()) <= 2:
            raise ValueError(f"category {self.category!r} must have one or two words")


@dataclass(frozen=True)
class LiteratureEffect:
    category: str
    outcome: str
    direction: str
    study_count: int
    pubs: tuple[str, ...]

    def __post_init__(self):
        if self.study_count != len(set(self.pubs)) or self.study_count < 1:
            raise ValueError("study_count must equal the number of distinct publications")

    def to_dict(self) -> dict:
        return {"category": self.category, "outcome": self.outcome, "direction": self.direction,
                "study_count": self.study_count, "pubs": list(self.pubs)}


@dataclass(frozen=True)
class UniqueCategory:
    category: str
    effects: tuple[tuple[str, str, int], ...]  # (outcome, direction, study_count)


# -- prompts --------------------------------------------------------------------------


@dataclass
class Prompts:
    data: dict = field(default_factory=lambda: load_resource("prompts.json"))

    def request(self, task: str, profile: ModelProfile, **slots) -> ChatRequest:
        spec = self.data[task]
        return ChatRequest(spec["system"], spec["user"].format(**slots), profile)


# -- single-item operations -----------------------------------------------------------

EXTRACT_SCHEMA = (Field("findings", "array"),)
CONDENSE_SCHEMA = (Field("category", "string", max_words=2),)
CLUSTER_SCHEMA = (Field("clusters", "array"),)


def extract_findings(
    gateway: Gateway, profile: ModelProfile, epmc_id: str, text: str,
    vocab: Vocabulary, prompts: Prompts,
) -> tuple[list[ExtractedFinding], int]:
    """Findings reported in one article, plus the number of malformed items dropped."""
    if not text.strip():
        raise ExtractionError(epmc_id, ValueError("empty full text"))
    try:
        res = gateway.complete_structured(
            prompts.request("extract", profile, epmc_id=epmc_id, text=text), EXTRACT_SCHEMA)
    except Exception as exc:
        raise ExtractionError(epmc_id, exc) from exc
    out, dropped = [], 0
    for item in res.parsed["findings"]:
        if not isinstance(item, dict):
            dropped += 1
            continue
        phrase = " ".join(str(item.get("context_phrase", "")).split())
        outcome = vocab.map_outcome(str(item.get("outcome", "")))
        direction = vocab.map_direction(str(item.get("direction", "")))
        if not phrase or outcome is None or direction is None:
            dropped += 1
            continue
        out.append(ExtractedFinding(epmc_id, phrase, outcome, direction,
                                    str(item.get("evidence", ""))))
    return out, dropped


class Condenser:
    """Memoized phrase -> category; identical phrases never hit the model twice."""

    def __init__(self, gateway: Gateway, profile: ModelProfile, prompts: Prompts):
        self.gateway, self.profile, self.prompts = gateway, profile, prompts
        self._memo: dict[str, CondensedCategory] = {}

    def __call__(self, phrase: str) -> CondensedCategory:
        if phrase in self._memo:
            return self._memo[phrase]
        if not phrase.strip():
            raise ValueError("empty phrase")
        try:
            res = self.gateway.complete_structured(
                self.prompts.request("condense", self.profile, phrase=phrase), CONDENSE_SCHEMA)
            label = normalize_label(res.parsed["category"]) or None
        except StructuredOutputError:
            label = None
        out = CondensedCategory(phrase, label)
        self._memo[phrase] = out
        return out


def partition(rows: Iterable[Mapping]) -> dict[str, list[dict]]:
    """Split labelled findings into the six outcome x direction sets plus the null set."""
    out: dict[str, list[dict]] = {d: [] for d in DATASETS}
    for r in rows:
        key = "null" if r["direction"] == "null" else f"{r['outcome']}_{r['direction']}"
        out[key].append(dict(r, dataset=key))
    return out


def _cluster_batch(gateway: Gateway, profile: ModelProfile, prompts: Prompts,
                   labels: Sequence[str]) -> dict[str, str]:
    if len(labels) == 1:
        return {labels[0]: labels[0]}
    req = prompts.request("cluster", profile, labels="\n".join(f"- {x}" for x in labels))
    assign: dict[str, str] = {}
    try:
        res = gateway.complete_structured(req, CLUSTER_SCHEMA)
        wanted = set(labels)
        for c in res.parsed["clusters"]:
            if not isinstance(c, dict) or not isinstance(c.get("members"), list):
                continue
            members = [normalize_label(str(m)) for m in c["members"]]
            members = [m for m in members if m in wanted and m not in assign]
            if not members:
                continue
            rep = normalize_label(str(c.get("label", ""))) or min(members)
            for m in members:
                assign[m] = rep
    except StructuredOutputError as exc:
        log.warning("cluster reply unusable (%s); keeping %d labels as singletons",
                    exc.diagnostic, len(labels))
    return {x: assign.get(x, x) for x in labels}


def cluster(gateway: Gateway, profile: ModelProfile, prompts: Prompts,
            categories: Iterable[str], batch_size: int = CLUSTER_BATCH) -> dict[str, str]:
    """Map each category to a cluster representative.

    Batches of at most ``batch_size`` labels; when there is more than one batch
    the batch representatives are clustered again until one batch remains.
    """
    labels = sorted(set(categories))
    mapping = {x: x for x in labels}
    current = labels
    while current:
        batches = [current[i: i + batch_size] for i in range(0, len(current), batch_size)]
        step: dict[str, str] = {}
        for b in batches:
            step.update(_cluster_batch(gateway, profile, prompts, b))
        mapping = {x: step.get(rep, rep) for x, rep in mapping.items()}
        reps = sorted(set(step.values()))
        if len(batches) == 1 or len(reps) == len(current):
            break
        current = reps
    return mapping


def assemble_effects(rows: Iterable[Mapping], min_studies: int = MIN_STUDIES) -> list[LiteratureEffect]:
    """Effects per (cluster, outcome, direction) with enough distinct publications.

    ``rows`` carry cluster, outcome, direction and epmc_id; null-direction rows are ignored.
    """
    pubs: dict[tuple[str, str, str], set[str]] = defaultdict(set)
    for r in rows:
        if r["direction"] == "null":
            continue
        pubs[(r["cluster"], r["outcome"], r["direction"])].add(r["epmc_id"])
    return [
        LiteratureEffect(cat, outcome, direction, len(ids), tuple(sorted(ids)))
        for (cat, outcome, direction), ids in sorted(pubs.items(),
                                                     key=lambda kv: (kv[0][1], kv[0][2], kv[0][0]))
        if len(ids) >= min_studies
    ]


def merge_unique(effects: Iterable[LiteratureEffect]) -> list[UniqueCategory]:
    groups: dict[str, list[tuple[str, str, int]]] = defaultdict(list)
    for e in effects:
        groups[normalize_label(e.category)].append((e.outcome, e.direction, e.study_count))
    return [UniqueCategory(k, tuple(sorted(v))) for k, v in sorted(groups.items())]


# -- orchestration ----------------------------------------------------------------


@dataclass
class PipelineContext:
    out_dir: Path
    gateway: Gateway | None = None
    profiles: Mapping[str, ModelProfile] = field(default_factory=dict)
    epmc: EpmcClient | None = None
    queries: Sequence[str] = ()
    prompts: Prompts = field(default_factory=Prompts)
    vocabulary: Vocabulary = field(default_factory=Vocabulary.load)
    jobs: int = 1
    cluster_batch: int = CLUSTER_BATCH
    min_studies: int = MIN_STUDIES

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoints"

    def checkpoint(self, step: int) -> Path:
        return self.checkpoint_dir / CHECKPOINTS[step]

    def read(self, step: int) -> list[dict]:
        path = self.checkpoint(step)
        if not path.exists():
            raise MissingCheckpointError(path)
        return list(read_ndjson(path))

    def need(self, what: str):
        obj = {"gateway": self.gateway, "epmc": self.epmc}[what]
        if obj is None:
            raise PipelineError(f"this step needs a configured {what}")
        return obj

    def pmap(self, fn: Callable, items: Sequence) -> list:
        if self.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


def step_mine(ctx: PipelineContext) -> dict:
    client = ctx.need("epmc")
    seen: dict[tuple[str, str], dict] = {}
    hits = 0
    for q in ctx.queries:
        for rec in client.search(q):
            seen.setdefault((rec.source, rec.epmc_id), asdict(rec))
        hits += client.hit_count(q) or 0
    rows = [seen[k] for k in sorted(seen)]
    for r in rows:
        r.pop("fulltext", None)
    write_ndjson(ctx.checkpoint(1), rows)
    return {"input": hits, "output": len(rows), "queries": len(ctx.queries)}


def step_extract(ctx: PipelineContext) -> dict:
    records = [PubRecord(**r) for r in ctx.read(1)]
    gateway, client = ctx.need("gateway"), ctx.need("epmc")
    profile = ctx.profiles["extract"]

    def one(rec: PubRecord) -> dict:
        row = {"epmc_id": rec.epmc_id, "source": rec.source, "findings": [], "dropped": 0,
               "error": None}
        if not rec.has_fulltext:
            row["error"] = "no full text"
            return row
        try:
            text = client.fetch_record(rec)
            found, row["dropped"] = extract_findings(gateway, profile, rec.epmc_id, text,
                                                     ctx.vocabulary, ctx.prompts)
            row["findings"] = [asdict(f) for f in found]
        except EpmcError as exc:
            row["error"] = f"fulltext: {exc}"
        except ExtractionError as exc:
            if not isinstance(exc.cause, StructuredOutputError):
                raise
            row["error"] = f"extraction: {exc.cause.diagnostic}"
        return row

    rows = ctx.pmap(one, records)
    write_ndjson(ctx.checkpoint(2), rows)
    n_findings = sum(len(r["findings"]) for r in rows)
    return {"input": len(records), "output": n_findings,
            "publications_with_findings": sum(bool(r["findings"]) for r in rows),
            "publications_failed": sum(r["error"] is not None for r in rows)}


def step_condense(ctx: PipelineContext) -> dict:
    rows = ctx.read(2)
    phrases = sorted({f["context_phrase"] for r in rows for f in r["findings"]})
    condense = Condenser(ctx.need("gateway"), ctx.profiles["condense"], ctx.prompts)
    results = ctx.pmap(condense, phrases)
    write_ndjson(ctx.checkpoint(3), [asdict(c) for c in results])
    return {"input": len(phrases), "output": sum(c.category is not None for c in results),
            "nonresponses": sum(c.category is None for c in results)}


def step_partition(ctx: PipelineContext) -> dict:
    labels = {r["phrase"]: r["category"] for r in ctx.read(3)}
    findings = [f for r in ctx.read(2) for f in r["findings"]]
    labelled = [
        {"epmc_id": f["epmc_id"], "phrase": f["context_phrase"],
         "category": labels[f["context_phrase"]], "outcome": f["outcome"],
         "direction": f["direction"]}
        for f in findings
        if labels.get(f["context_phrase"])
    ]
    parts = partition(labelled)
    out = [r for d in DATASETS for r in sorted(parts[d], key=lambda r: (r["category"], r["epmc_id"],
                                                                           r["phrase"]))]
    write_ndjson(ctx.checkpoint(4), out)
    sizes = {d: len(parts[d]) for d in DATASETS}
    return {"input": len(labelled), "output": sum(sizes.values()), "datasets": sizes}


def step_cluster(ctx: PipelineContext) -> dict:
    rows = ctx.read(4)
    per_dataset: dict[str, set[str]] = defaultdict(set)
    for r in rows:
        per_dataset[r["dataset"]].add(r["category"])
    gateway, profile = ctx.need("gateway"), ctx.profiles["cluster"]
    todo = [d for d in DATASETS if per_dataset.get(d)]
    maps = ctx.pmap(lambda d: cluster(gateway, profile, ctx.prompts, per_dataset[d],
                                      ctx.cluster_batch), todo)
    out = [{"dataset": d, "category": c, "cluster": m[c]}
           for d, m in zip(todo, maps) for c in sorted(m)]
    write_ndjson(ctx.checkpoint(5), out)
    n_clusters = {d: len(set(m.values())) for d, m in zip(todo, maps)}
    return {"input": sum(len(v) for v in per_dataset.values()),
            "output": sum(n_clusters.values()),
            "non_null": sum(v for d, v in n_clusters.items() if d != "null")}


def step_assemble(ctx: PipelineContext) -> dict:
    clusters = {(r["dataset"], r["category"]): r["cluster"] for r in ctx.read(5)}
    rows = [dict(r, cluster=clusters[(r["dataset"], r["category"])])
            for r in ctx.read(4) if r["dataset"] != "null"]
    effects = assemble_effects(rows, ctx.min_studies)
    unique = merge_unique(effects)
    write_ndjson(ctx.checkpoint(6), [e.to_dict() for e in effects])
    atomic_write_text(ctx.out_dir / "effects.json",
                      json.dumps([e.to_dict() for e in effects], indent=1, sort_keys=True) + "\n")
    atomic_write_text(ctx.out_dir / "categories.json", json.dumps(
        [{"category": u.category,
          "effects": [{"outcome": o, "direction": d, "study_count": n} for o, d, n in u.effects]}
         for u in unique], indent=1, sort_keys=True) + "\n")
    candidates = len({(r["cluster"], r["outcome"], r["direction"]) for r in rows})
    return {"input": candidates, "output": len(effects), "unique_categories": len(unique)}


STEP_FUNCS = {1: step_mine, 2: step_extract, 3: step_condense, 4: step_partition,
              5: step_cluster, 6: step_assemble}

# last step each CLI command runs
COMMAND_STEPS = {"mine": (1, 1), "extract": (2, 2), "condense": (3, 3), "cluster": (4, 5),
                 "assemble": (6, 6)}


def parse_step(text: str) -> int:
    m = re.fullmatch(r"(?:step)?([1-6])", text.strip().lower())
    if not m:
        raise ValueError(f"unknown checkpoint {text!r}; expected step1 .. step6")
    return int(m.group(1))


def run_steps(ctx: PipelineContext, first: int, last: int) -> list[dict]:
    """Run steps ``first..last``; each appends one ledger row."""
    if not 1 <= first <= last <= 6:
        raise ValueError(f"invalid step range {first}..{last}")
    if first > 1 and not ctx.checkpoint(first - 1).exists():
        raise MissingCheckpointError(ctx.checkpoint(first - 1))
    rows = []
    for step in range(first, last + 1):
        t0 = time.perf_counter()
        stats = STEP_FUNCS[step](ctx)
        row = {"step": step, "name": STEPS[step - 1], **stats,
               "wall_time": round(time.perf_counter() - t0, 6),
               "finished_at": datetime.now(timezone.utc).isoformat()}
        append_ndjson(ctx.out_dir / "ledger.jsonl", row)
        log.info("step %d %s: %s -> %s", step, row["name"], row["input"], row["output"])
        rows.append(row)
    return rows


def run_command(ctx: PipelineContext, command: str, from_checkpoint: str | None = None) -> list[dict]:
    first, last = COMMAND_STEPS[command]
    if from_checkpoint is not None:
        first = parse_step(from_checkpoint)
        if first > last:
            raise ValueError(f"{command} ends at step{last}; cannot start at step{first}")
    return run_steps(ctx, first, last)
