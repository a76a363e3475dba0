"""Join EMA observations to photo-level outcomes and build model designs."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..data import StudyDataset, design_columns, score_pss
from .lmm import LmmSpec

PREDICTOR_SETS = {
    "greenness": "Subjective greenness",
    "affect": "Positive and negative affect",
}


def model_spec(
    dataset: StudyDataset,
    outcome_by_photo: Mapping[str, float],
    predictor_set: str,
    *,
    center_trait: bool = False,
) -> LmmSpec:
    """Random-intercept design: photo outcome ~ trait + state of the predictor set.

    Traits are person means over all eligible alarms; rows missing the
    outcome or any predictor are dropped listwise.
    """
    obs = dataset.eligible_observations()
    names, cols = design_columns(obs, predictor_set, center_trait=center_trait)
    y = np.array(
        [outcome_by_photo.get(o.photo_id, math.nan) if o.photo_id else math.nan for o in obs],
        dtype=float,
    )
    keep = np.isfinite(y) & np.all(np.isfinite(cols), axis=1)
    groups = np.array([o.participant_id for o in obs], dtype=object)[keep]
    X = np.column_stack([np.ones(int(keep.sum())), cols[keep]])
    return LmmSpec(y[keep], X, groups, ("(Intercept)",) + names)


def participant_means(
    dataset: StudyDataset, outcome_by_photo: Mapping[str, float]
) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for o in dataset.eligible_observations():
        v = outcome_by_photo.get(o.photo_id) if o.photo_id else None
        if v is not None and math.isfinite(v):
            sums.setdefault(o.participant_id, []).append(v)
    return {pid: math.fsum(v) / len(v) for pid, v in sums.items()}


def trait_vs_pss(
    dataset: StudyDataset, outcome_by_photo: Mapping[str, float]
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Paired participant means of the outcome and PSS scores, sorted by id."""
    means = participant_means(dataset, outcome_by_photo)
    pids, xs, ys = [], [], []
    for pid in sorted(means):
        pss = score_pss(dataset.baseline(pid))
        if pss is not None:
            pids.append(pid)
            xs.append(means[pid])
            ys.append(pss)
    return np.array(xs), np.array(ys), pids
