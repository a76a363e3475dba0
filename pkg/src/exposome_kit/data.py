"""EMA study data: records, CSV ingestion, scale scoring, centering, simulation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

N_AFFECT_ITEMS = 10
N_PSS_ITEMS = 10
AFFECT_RANGE = (1, 5)
GREENNESS_RANGE = (1, 6)
PSS_RANGE = (1, 5)
DAY_START = time(9, 0)
DAY_END = time(20, 0)

AFFECT_COLUMNS = [f"pa{i}" for i in range(1, 6)] + [f"na{i}" for i in range(1, 6)]
EMA_HEADER = ["participant_id", "alarm_time", *AFFECT_COLUMNS, "greenness_self", "photo_id"]
PSS_COLUMNS = [f"pss{i}" for i in range(1, N_PSS_ITEMS + 1)]
BASELINE_HEADER = ["participant_id", "age", "sex", *PSS_COLUMNS]


class DataValidationError(ValueError):
    """Raised for malformed input files; ``diagnostics`` lists every bad row."""

    def __init__(self, diagnostics: list["RowDiagnostic"]):
        self.diagnostics = diagnostics
        head = "; ".join(str(d) for d in diagnostics[:5])
        more = f" (+{len(diagnostics) - 5} more)" if len(diagnostics) > 5 else ""
        super().__init__(head + more)


@dataclass(frozen=True)
class RowDiagnostic:
    path: str
    line: int
    field: str
    message: str

    def __str__(self):
        return f"{self.path}:{self.line}: field {self.field!r}: {self.message}"


@dataclass(frozen=True)
class EmaObservation:
    participant_id: str
    alarm_time: datetime
    affect_items: tuple[int | None, ...]
    greenness_self: int | None = None
    photo_id: str | None = None

    def __post_init__(self):
        if len(self.affect_items) != N_AFFECT_ITEMS:
            raise ValueError(f"expected {N_AFFECT_ITEMS} affect items")
        for v in self.affect_items:
            if v is not None and not AFFECT_RANGE[0] <= v <= AFFECT_RANGE[1]:
                raise ValueError(f"affect item {v} outside {AFFECT_RANGE}")
        g = self.greenness_self
        if g is not None and not GREENNESS_RANGE[0] <= g <= GREENNESS_RANGE[1]:
            raise ValueError(f"greenness {g} outside {GREENNESS_RANGE}")
        if not DAY_START <= self.alarm_time.time() <= DAY_END:
            raise ValueError(f"alarm {self.alarm_time:%H:%M} outside 09:00-20:00")


@dataclass(frozen=True)
class ParticipantBaseline:
    participant_id: str
    age: float | None
    sex: str
    pss_items: tuple[int | None, ...]

    def __post_init__(self):
        if len(self.pss_items) != N_PSS_ITEMS:
            raise ValueError(f"expected exactly {N_PSS_ITEMS} PSS items")
        for v in self.pss_items:
            if v is not None and not PSS_RANGE[0] <= v <= PSS_RANGE[1]:
                raise ValueError(f"PSS item {v} outside {PSS_RANGE}")


@dataclass
class StudyDataset:
    observations: list[EmaObservation]
    baselines: list[ParticipantBaseline]
    provenance: str = ""

    def __post_init__(self):
        known = {b.participant_id for b in self.baselines}
        unknown = sorted({o.participant_id for o in self.observations} - known)
        if unknown:
            raise ValueError(f"observations for participants without baseline: {unknown}")

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {b.participant_id: 0 for b in self.baselines}
        for o in self.observations:
            out[o.participant_id] += 1
        return out

    @property
    def excluded_participants(self) -> list[str]:
        """Participants with fewer than two observations (kept, but not modelled)."""
        return sorted(pid for pid, n in self.counts().items() if n < 2)

    def eligible_observations(self) -> list[EmaObservation]:
        excluded = set(self.excluded_participants)
        return [o for o in self.observations if o.participant_id not in excluded]

    def baseline(self, participant_id: str) -> ParticipantBaseline:
        for b in self.baselines:
            if b.participant_id == participant_id:
                return b
        raise KeyError(participant_id)

    def __eq__(self, other):
        if not isinstance(other, StudyDataset):
            return NotImplemented
        return self.observations == other.observations and self.baselines == other.baselines


# -- scoring -----------------------------------------------------------------


def _mean_or_none(values: Sequence[int | None]) -> float | None:
    if any(v is None for v in values):
        return None
    return math.fsum(values) / len(values)


def derive_affect(obs: EmaObservation) -> tuple[float | None, float | None]:
    """Positive and negative affect as the mean of their five items each."""
    return _mean_or_none(obs.affect_items[:5]), _mean_or_none(obs.affect_items[5:])


def score_pss(baseline: ParticipantBaseline) -> float | None:
    return _mean_or_none(baseline.pss_items)


# -- centering ---------------------------------------------------------------


@dataclass(frozen=True)
class CenteredPredictor:
    """Person means (trait) and deviations from them (state).

    ``state`` is aligned with the input rows; rows of participants without any
    non-missing value carry NaN and are listed in ``excluded``.
    """

    groups: np.ndarray
    trait: dict
    state: np.ndarray
    excluded: tuple = ()

    def trait_values(self) -> np.ndarray:
        return np.array([self.trait.get(g, math.nan) for g in self.groups], dtype=float)


def person_center(values: Sequence[float | None], groups: Sequence[Hashable]) -> CenteredPredictor:
    x = np.array([math.nan if v is None else v for v in values], dtype=float)
    groups = np.asarray(groups, dtype=object)
    if len(x) != len(groups):
        raise ValueError("values and groups differ in length")
    trait, excluded = {}, []
    state = np.full_like(x, math.nan)
    for g in dict.fromkeys(groups):
        rows = groups == g
        vals = x[rows]
        ok = ~np.isnan(vals)
        if not ok.any():
            excluded.append(g)
            continue
        mean = math.fsum(vals[ok]) / ok.sum()
        trait[g] = mean
        state[rows] = vals - mean
    return CenteredPredictor(groups, trait, state, tuple(excluded))


# -- alarm schedule ------------------------------------------------------------


def generate_alarm_schedule(
    day_start: time = DAY_START,
    day_end: time = DAY_END,
    n: int = 7,
    min_gap: timedelta = timedelta(minutes=30),
    seed: int | np.random.Generator | None = None,
    day: date = date(2025, 1, 6),
) -> list[datetime]:
    """``n`` sorted alarm times (minute resolution) with gaps of at least ``min_gap``.

    Uniform over the feasible lattice: draw ``n`` distinct slots from a window
    shrunk by ``(n-1)`` gaps (stars and bars), then re-inflate the i-th order
    statistic by ``i`` gaps.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    start = datetime.combine(day, day_start)
    window = int((datetime.combine(day, day_end) - start).total_seconds() // 60)
    gap = int(min_gap.total_seconds() // 60)
    slack = window - (n - 1) * gap
    if slack < 0:
        raise ValueError(f"{n} alarms with {gap}-minute gaps do not fit in {window} minutes")
    picks = np.sort(rng.choice(slack + n, size=n, replace=False))
    offsets = picks - np.arange(n) + np.arange(n) * gap
    return [start + timedelta(minutes=int(m)) for m in offsets]


# -- CSV I/O -------------------------------------------------------------------


def _parse_int(raw: str, lo: int, hi: int) -> int | None:
    raw = raw.strip()
    if raw == "":
        return None
    value = float(raw)
    if not value.is_integer():
        raise ValueError(f"{raw!r} is not an integer")
    if not lo <= value <= hi:
        raise ValueError(f"{raw} outside [{lo}, {hi}]")
    return int(value)


def _parse_timestamp(raw: str) -> datetime:
    raw = raw.strip()
    # fromisoformat accepts any separator character before 3.11
    if len(raw) < 16 or raw[10] not in "T ":
        raise ValueError(f"{raw!r} is not an ISO 8601 timestamp")
    return datetime.fromisoformat(raw)


def _read_rows(path: Path, required: Sequence[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        missing = [c for c in required if c not in header]
        if missing:
            raise DataValidationError([RowDiagnostic(str(path), 1, missing[0], "missing column")])
        return header, [(reader.line_num, row) for row in reader]


def _pss_columns(header: Sequence[str], path: Path) -> list[tuple[str, bool]]:
    cols = []
    for i in range(1, N_PSS_ITEMS + 1):
        if f"pss{i}" in header:
            cols.append((f"pss{i}", False))
        elif f"pss{i}_r" in header:
            cols.append((f"pss{i}_r", True))
        else:
            raise DataValidationError([RowDiagnostic(str(path), 1, f"pss{i}", "missing column")])
    return cols


def load_dataset(ema_path, baseline_path, provenance: str | None = None) -> StudyDataset:
    """Read and validate ``ema.csv`` and ``baseline.csv``.

    A baseline column named ``pssN_r`` marks item N as raw and reverse-keyed;
    it is recoded to ``6 - value`` on load.
    """
    ema_path, baseline_path = Path(ema_path), Path(baseline_path)
    diags: list[RowDiagnostic] = []

    header, rows = _read_rows(baseline_path, ["participant_id", "age", "sex"])
    pss_cols = _pss_columns(header, baseline_path)
    baselines = []
    for line, row in rows:
        current = "participant_id"
        try:
            pid = row["participant_id"].strip()
            if not pid:
                raise ValueError("empty participant id")
            current = "age"
            age = float(row["age"]) if row["age"].strip() else None
            items = []
            for col, reverse in pss_cols:
                current = col
                v = _parse_int(row[col], *PSS_RANGE)
                items.append(PSS_RANGE[1] + 1 - v if reverse and v is not None else v)
            baselines.append(ParticipantBaseline(pid, age, row["sex"].strip(), tuple(items)))
        except (ValueError, TypeError, AttributeError) as exc:
            diags.append(RowDiagnostic(str(baseline_path), line, current, str(exc)))

    _, rows = _read_rows(ema_path, EMA_HEADER)
    known = {b.participant_id for b in baselines}
    observations = []
    for line, row in rows:
        current = "participant_id"
        try:
            pid = row["participant_id"].strip()
            if pid not in known:
                raise ValueError(f"unknown participant_id {pid!r}")
            current = "alarm_time"
            when = _parse_timestamp(row["alarm_time"])
            if not DAY_START <= when.time() <= DAY_END:
                raise ValueError(f"{when:%H:%M} outside 09:00-20:00")
            items = []
            for col in AFFECT_COLUMNS:
                current = col
                items.append(_parse_int(row[col], *AFFECT_RANGE))
            current = "greenness_self"
            green = _parse_int(row["greenness_self"], *GREENNESS_RANGE)
            photo = row["photo_id"].strip() or None
            observations.append(EmaObservation(pid, when, tuple(items), green, photo))
        except (ValueError, TypeError, AttributeError) as exc:
            diags.append(RowDiagnostic(str(ema_path), line, current, str(exc)))

    if diags:
        raise DataValidationError(diags)
    return StudyDataset(
        observations, baselines, provenance or f"{ema_path.name} + {baseline_path.name}"
    )


def _cell(v) -> str:
    return "" if v is None else str(v)


def dataset_to_csv(dataset: StudyDataset) -> tuple[str, str]:
    ema, base = io.StringIO(), io.StringIO()
    w = csv.writer(ema, lineterminator="\n")
    w.writerow(EMA_HEADER)
    for o in dataset.observations:
        w.writerow(
            [o.participant_id, o.alarm_time.isoformat(), *map(_cell, o.affect_items),
             _cell(o.greenness_self), _cell(o.photo_id)]
        )
    w = csv.writer(base, lineterminator="\n")
    w.writerow(BASELINE_HEADER)
    for b in dataset.baselines:
        w.writerow([b.participant_id, _cell(b.age), b.sex, *map(_cell, b.pss_items)])
    return ema.getvalue(), base.getvalue()


def write_dataset(dataset: StudyDataset, ema_path, baseline_path) -> None:
    from ._io import atomic_write_text

    ema, base = dataset_to_csv(dataset)
    atomic_write_text(ema_path, ema)
    atomic_write_text(baseline_path, base)


# -- simulation ----------------------------------------------------------------

DESIGNS = ("gaussian", "greenness", "affect")


@dataclass(frozen=True)
class SimulationConfig:
    """Generative settings for a synthetic EMA study.

    ``design`` picks the fixed-effect columns after the intercept:
    ``gaussian`` draws iid N(0, 1) covariates, ``greenness`` uses the
    subjective-greenness trait and state, ``affect`` the PA/NA trait and state.
    """

    n_participants: int = 100
    days: int = 7
    alarms_per_day: int = 7
    tau00: float = 1.0
    sigma2: float = 4.0
    beta: tuple[float, ...] = (2.0, 0.5)
    design: str = "gaussian"
    seed: int = 0
    photo_skip_prob: float = 0.0
    obs_per_participant: int | None = None
    feature: str = "greenness"

    def __post_init__(self):
        if self.tau00 < 0 or self.sigma2 < 0:
            raise ValueError("variances must be non-negative")
        if self.alarms_per_day < 1 or self.days < 1 or self.n_participants < 1:
            raise ValueError("participants, days and alarms_per_day must be >= 1")
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")
        width = {"gaussian": None, "greenness": 3, "affect": 5}[self.design]
        if width is not None and len(self.beta) != width:
            raise ValueError(f"design {self.design!r} needs {width} coefficients")
        if self.obs_per_participant is not None and not (
            1 <= self.obs_per_participant <= self.days * self.alarms_per_day
        ):
            raise ValueError("obs_per_participant must fit in days x alarms_per_day")


@dataclass
class GroundTruth:
    config: SimulationConfig
    names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    photo_ids: list[str | None]
    random_intercepts: dict[str, float] = field(default_factory=dict)

    def outcome_by_photo(self) -> dict[str, float]:
        return {p: float(v) for p, v in zip(self.photo_ids, self.y) if p is not None}


def _likert(latent: np.ndarray, lo: int, hi: int) -> np.ndarray:
    return np.clip(np.rint(latent), lo, hi).astype(int)


def design_columns(
    observations: Sequence[EmaObservation], design: str, center_trait: bool = False
) -> tuple[tuple[str, ...], np.ndarray]:
    """Fixed-effect columns (after the intercept) for the named predictor set."""
    groups = [o.participant_id for o in observations]
    if design == "greenness":
        sources = {"greenness": [o.greenness_self for o in observations]}
    elif design == "affect":
        pa, na = zip(*(derive_affect(o) for o in observations)) if observations else ((), ())
        sources = {"positive_affect": list(pa), "negative_affect": list(na)}
    else:
        raise ValueError(f"unknown predictor set {design!r}")
    names, cols = [], []
    for label, values in sources.items():
        c = person_center(values, groups)
        trait = c.trait_values()
        if center_trait and c.trait:
            trait = trait - math.fsum(c.trait.values()) / len(c.trait)
        names += [f"{label}_trait", f"{label}_state"]
        cols += [trait, c.state]
    return tuple(names), np.column_stack(cols)


def simulate_study(config: SimulationConfig) -> tuple[StudyDataset, GroundTruth]:
    """Synthetic study with ``y = X beta + b_i + e`` and known components."""
    rng = np.random.default_rng(config.seed)
    observations, baselines = [], []
    random_intercepts = {}
    start = date(2025, 1, 6)
    width = len(str(config.n_participants))
    for i in range(config.n_participants):
        pid = f"P{i + 1:0{width}d}"
        random_intercepts[pid] = float(rng.normal(0.0, math.sqrt(config.tau00)))
        pa_level, na_level = rng.normal(2.9, 0.6), rng.normal(1.4, 0.35)
        green_level = rng.normal(2.5, 0.9)
        pss_level = rng.normal(2.9, 0.6)
        pss = _likert(pss_level + rng.normal(0, 0.7, N_PSS_ITEMS), *PSS_RANGE)
        baselines.append(
            ParticipantBaseline(
                pid, float(rng.integers(18, 60)), str(rng.choice(["female", "male"])),
                tuple(int(v) for v in pss),
            )
        )
        slots = []
        for d in range(config.days):
            slots += generate_alarm_schedule(
                n=config.alarms_per_day, seed=rng, day=start + timedelta(days=d)
            )
        if config.obs_per_participant is not None:
            keep = np.sort(rng.choice(len(slots), config.obs_per_participant, replace=False))
            slots = [slots[k] for k in keep]
        for j, when in enumerate(slots):
            pa = _likert(pa_level + rng.normal(0, 0.5) + rng.normal(0, 0.4, 5), *AFFECT_RANGE)
            na = _likert(na_level + rng.normal(0, 0.3) + rng.normal(0, 0.3, 5), *AFFECT_RANGE)
            green = int(_likert(green_level + rng.normal(0, 1.2, 1), *GREENNESS_RANGE)[0])
            photo = None if rng.random() < config.photo_skip_prob else f"{pid}_{j + 1:03d}"
            observations.append(
                EmaObservation(pid, when, tuple(int(v) for v in (*pa, *na)), green, photo)
            )

    groups = np.array([o.participant_id for o in observations], dtype=object)
    if config.design == "gaussian":
        k = len(config.beta) - 1
        cols = rng.normal(size=(len(observations), k))
        names = tuple(f"x{c + 1}" for c in range(k))
    else:
        names, cols = design_columns(observations, config.design)
    X = np.column_stack([np.ones(len(observations)), cols])
    b = np.array([random_intercepts[g] for g in groups])
    eps = rng.normal(0.0, math.sqrt(config.sigma2), len(observations))
    y = X @ np.asarray(config.beta, dtype=float) + b + eps
    dataset = StudyDataset(observations, baselines, f"simulate_study(seed={config.seed})")
    truth = GroundTruth(
        config, ("(Intercept)",) + names, X, y, groups,
        [o.photo_id for o in observations], random_intercepts,
    )
    return dataset, truth

