"""Run configuration read from one TOML file.

Relative paths are resolved against the directory holding the file.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .epmc import SearchQuery, build_query
from .gateway import STAGE_TEMPERATURES, ModelProfile

MODEL_ROLES = {
    "extract": STAGE_TEMPERATURES["extract"],
    "condense": STAGE_TEMPERATURES["condense"],
    "cluster": STAGE_TEMPERATURES["cluster"],
    "rater_a": STAGE_TEMPERATURES["rate"],
    "rater_b": STAGE_TEMPERATURES["rate_replication"],
}
DEFAULT_ENDPOINT = "http://localhost:8000"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataPaths:
    ema: Path | None = None
    baseline: Path | None = None
    photos: Path | None = None
    catalog: Path | None = None
    vocabulary: Path | None = None
    prompts: Path | None = None


@dataclass(frozen=True)
class RatingSettings:
    k_greenness: int = 5
    k_catalog: int = 1
    max_edge: int = 1024
    binary_features: tuple[str, ...] = ()
    feature_scales: Mapping[str, str] = field(default_factory=dict)

    def scale_for(self, feature: str) -> str:
        if feature in self.feature_scales:
            return self.feature_scales[feature]
        return "binary" if feature in self.binary_features else "continuous"


@dataclass(frozen=True)
class SimulationSettings:
    n_participants: int = 100
    days: int = 7
    alarms_per_day: int = 7
    tau00: float = 1.0
    sigma2: float = 4.0
    beta: tuple[float, ...] = (2.0, 0.8, 0.6)
    design: str = "greenness"
    photo_skip_prob: float = 0.1
    photos: bool = True


@dataclass(frozen=True)
class RunConfig:
    path: Path | None
    output_dir: Path
    seed: int = 0
    jobs: int = 1
    queries: tuple[SearchQuery, ...] = (SearchQuery(),)
    models: Mapping[str, ModelProfile] = field(default_factory=dict)
    data: DataPaths = DataPaths()
    epmc_base_url: str | None = None
    epmc_cache_dir: Path | None = None
    epmc_replay_dir: Path | None = None
    epmc_page_size: int = 1000
    fetch_in_flight: int = 8
    gateway_in_flight: int = 16
    gateway_rps: float | None = None
    retry_attempts: int = 5
    stub: bool = False
    rating: RatingSettings = RatingSettings()
    simulation: SimulationSettings = SimulationSettings()
    min_studies: int = 3
    cluster_batch: int = 200
    palette: tuple[str, str] = ("#3b6fb6", "#e17fa8")

    def query_strings(self) -> list[str]:
        return [build_query(q) for q in self.queries]

    def model(self, role: str) -> ModelProfile:
        if role not in self.models:
            raise ConfigError(f"no [models.{role}] section")
        return self.models[role].with_env()

    def require(self, **paths: Path | None) -> None:
        """Raise unless every named path is configured and exists."""
        for name, p in paths.items():
            if p is None:
                raise ConfigError(f"config does not set {name}")
            if not Path(p).exists():
                raise ConfigError(f"{name} does not exist: {p}")

    def with_overrides(self, *, seed: int | None = None, jobs: int | None = None) -> "RunConfig":
        return replace(self, seed=self.seed if seed is None else seed,
                       jobs=self.jobs if jobs is None else jobs)


def _section(doc: Mapping, name: str) -> dict:
    sec = doc.pop(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _take(sec: dict, key: str, kind, default, where: str):
    if key not in sec:
        return default
    v = sec.pop(key)
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or (kind is int and isinstance(v, bool)):
        raise ConfigError(f"{where}.{key} must be {getattr(kind, '__name__', kind)}, got {v!r}")
    return v


def _strs(v, where: str) -> tuple[str, ...]:
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ConfigError(f"{where} must be a list of strings")
    return tuple(v)


def _reject_unknown(sec: dict, where: str) -> None:
    if sec:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(sec))}")


def _query(sec: dict, where: str) -> SearchQuery:
    sec = dict(sec)
    mandatory = _strs(sec.pop("mandatory", ["Psychology"]), f"{where}.mandatory")
    if not mandatory:
        raise ConfigError(f"{where}.mandatory must not be empty")
    q = SearchQuery(
        mandatory_terms=mandatory,
        outcome_terms=_strs(sec.pop("outcome", []), f"{where}.outcome"),
        context_terms=_strs(sec.pop("context", []), f"{where}.context"),
        open_access_only=_take(sec, "open_access_only", bool, True, where),
        extra_filters=_strs(sec.pop("extra_filters", []), f"{where}.extra_filters"),
    )
    _reject_unknown(sec, where)
    return q


def parse_config(doc: Mapping[str, Any], base: Path, path: Path | None = None) -> RunConfig:
    doc = dict(doc)

    def rel(v: str | None) -> Path | None:
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"path must be a string, got {v!r}")
        p = Path(os.path.expandvars(v)).expanduser()
        return p if p.is_absolute() else base / p

    top = {k: doc.pop(k) for k in ("seed", "jobs", "output_dir", "stub", "palette") if k in doc}
    seed = _take(top, "seed", int, 0, "top")
    jobs = _take(top, "jobs", int, 1, "top")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    output_dir = rel(_take(top, "output_dir", str, "out", "top"))
    stub = _take(top, "stub", bool, False, "top")
    palette = tuple(_strs(top.pop("palette", ["#3b6fb6", "#e17fa8"]), "palette"))
    if len(palette) != 2:
        raise ConfigError("palette needs two colours")

    # query family: [[queries]] tables, or a separate versioned file
    queries_doc = doc.pop("queries", None)
    query_file = doc.pop("query_file", None)
    if query_file is not None:
        qpath = rel(query_file)
        try:
            queries_doc = tomllib.loads(qpath.read_text("utf-8")).get("queries")
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read query file {qpath}: {exc}") from exc
    if queries_doc is None:
        queries = (SearchQuery(),)
    elif isinstance(queries_doc, list) and queries_doc:
        queries = tuple(_query(q, f"queries[{i}]") for i, q in enumerate(queries_doc))
    else:
        raise ConfigError("queries must be a non-empty array of tables")

    d = _section(doc, "data")
    data = DataPaths(**{k: rel(_take(d, k, str, None, "data")) for k in
                        ("ema", "baseline", "photos", "catalog", "vocabulary", "prompts")})
    _reject_unknown(d, "[data]")

    e = _section(doc, "epmc")
    epmc_base = _take(e, "base_url", str, None, "epmc")
    cache = rel(_take(e, "cache_dir", str, None, "epmc"))
    replay = rel(_take(e, "replay_dir", str, None, "epmc"))
    page_size = _take(e, "page_size", int, 1000, "epmc")
    fetch_in_flight = _take(e, "max_in_flight", int, 8, "epmc")
    _reject_unknown(e, "[epmc]")

    g = _section(doc, "gateway")
    gw_in_flight = _take(g, "max_in_flight", int, 16, "gateway")
    rps = _take(g, "rps", float, 0.0, "gateway") or None
    attempts = _take(g, "retry_attempts", int, 5, "gateway")
    _reject_unknown(g, "[gateway]")
    if min(page_size, fetch_in_flight, gw_in_flight, attempts) < 1:
        raise ConfigError("page_size, max_in_flight and retry_attempts must be >= 1")

    m = _section(doc, "models")
    models = {}
    for role, temp in MODEL_ROLES.items():
        sec = m.pop(role, None)
        if sec is None:
            continue
        if not isinstance(sec, dict):
            raise ConfigError(f"[models.{role}] must be a table")
        sec = dict(sec)
        where = f"models.{role}"
        try:
            models[role] = ModelProfile(
                endpoint=_take(sec, "endpoint", str, DEFAULT_ENDPOINT, where),
                model=_take(sec, "model", str, role, where),
                temperature=_take(sec, "temperature", float, temp, where),
                max_tokens=_take(sec, "max_tokens", int, 1024, where),
                timeout=_take(sec, "timeout", float, 120.0, where),
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        _reject_unknown(sec, f"[{where}]")
    _reject_unknown(m, "[models]")

    r = _section(doc, "rating")
    scales = r.pop("feature_scales", {})
    if not isinstance(scales, dict) or any(v not in ("binary", "continuous") for v in scales.values()):
        raise ConfigError("rating.feature_scales maps feature names to 'binary' or 'continuous'")
    rating = RatingSettings(
        k_greenness=_take(r, "k_greenness", int, 5, "rating"),
        k_catalog=_take(r, "k_catalog", int, 1, "rating"),
        max_edge=_take(r, "max_edge", int, 1024, "rating"),
        binary_features=_strs(r.pop("binary_features", []), "rating.binary_features"),
        feature_scales=scales,
    )
    _reject_unknown(r, "[rating]")
    if min(rating.k_greenness, rating.k_catalog, rating.max_edge) < 1:
        raise ConfigError("rating counts and max_edge must be >= 1")

    s = _section(doc, "simulate")
    beta = s.pop("beta", None)
    if beta is not None and not (isinstance(beta, list) and all(
            isinstance(b, (int, float)) and not isinstance(b, bool) for b in beta)):
        raise ConfigError("simulate.beta must be a list of numbers")
    defaults = SimulationSettings()
    sim = SimulationSettings(
        n_participants=_take(s, "n_participants", int, defaults.n_participants, "simulate"),
        days=_take(s, "days", int, defaults.days, "simulate"),
        alarms_per_day=_take(s, "alarms_per_day", int, defaults.alarms_per_day, "simulate"),
        tau00=_take(s, "tau00", float, defaults.tau00, "simulate"),
        sigma2=_take(s, "sigma2", float, defaults.sigma2, "simulate"),
        beta=tuple(float(b) for b in beta) if beta is not None else defaults.beta,
        design=_take(s, "design", str, defaults.design, "simulate"),
        photo_skip_prob=_take(s, "photo_skip_prob", float, defaults.photo_skip_prob, "simulate"),
        photos=_take(s, "photos", bool, defaults.photos, "simulate"),
    )
    _reject_unknown(s, "[simulate]")

    p = _section(doc, "pipeline")
    min_studies = _take(p, "min_studies", int, 3, "pipeline")
    cluster_batch = _take(p, "cluster_batch", int, 200, "pipeline")
    _reject_unknown(p, "[pipeline]")
    if min_studies < 1 or cluster_batch < 2:
        raise ConfigError("pipeline.min_studies >= 1 and cluster_batch >= 2 required")

    _reject_unknown(doc, "the config")
    return RunConfig(
        path=path, output_dir=output_dir, seed=seed, jobs=jobs, queries=queries,
        models=models, data=data, epmc_base_url=epmc_base, epmc_cache_dir=cache,
        epmc_replay_dir=replay,
        epmc_page_size=page_size, fetch_in_flight=fetch_in_flight,
        gateway_in_flight=gw_in_flight, gateway_rps=rps, retry_attempts=attempts, stub=stub,
        rating=rating, simulation=sim, min_studies=min_studies, cluster_batch=cluster_batch,
        palette=palette,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.resolve().parent, path)
