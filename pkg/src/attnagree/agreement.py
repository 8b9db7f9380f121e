"""Agreement between relevance maps and physician understanding: feature
rankings compared by rank correlation, and a rule-based surrogate scorer for
image maps against the node-band geometry."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .data import FEATURE_SCHEMA
from .relevance import AttentionMaps, upsample_heatmap
from .stats import pearson, spearman

FEATURE_NAMES = tuple(spec.name for spec in FEATURE_SCHEMA)

SCORE_HI_THRESHOLD = 0.5    # in-band mass for score 1
SCORE_LO_THRESHOLD = 0.2    # in-band mass for score 2


def _check_permutation(ranking) -> list:
    names = list(ranking)
    if sorted(names) != sorted(FEATURE_NAMES):
        raise ValueError("ranking must be a permutation of the "
                         f"{len(FEATURE_NAMES)} feature names")
    return names


def attention_ranking(feature_relevance) -> list:
    """Feature names, most relevant first; ties fall back to schema order."""
    values = np.asarray(feature_relevance, dtype=np.float64)
    if values.shape != (len(FEATURE_NAMES),):
        raise ValueError(f"expected {len(FEATURE_NAMES)} values, "
                         f"got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("relevance values must be finite")
    order = np.argsort(-values, kind="stable")
    return [FEATURE_NAMES[i] for i in order]


def ranking_to_ranks(ranking) -> list:
    """Rank per schema position, 1 = most relevant."""
    names = _check_permutation(ranking)
    position = {name: i + 1 for i, name in enumerate(names)}
    return [position[name] for name in FEATURE_NAMES]


def ranking_agreement(ranking_a, ranking_b) -> float:
    """Rank correlation of two feature orderings (alpha_table)."""
    return spearman(ranking_to_ranks(ranking_a), ranking_to_ranks(ranking_b))


def save_ranking(ranking, path) -> None:
    names = _check_permutation(ranking)
    with open(path, "w") as fh:
        json.dump(names, fh, indent=2)
        fh.write("\n")


def load_ranking(path) -> list:
    with open(path) as fh:
        return _check_permutation(json.load(fh))


def simulate_image_score(maps: AttentionMaps, band_mask: np.ndarray, config,
                         hi: float = SCORE_HI_THRESHOLD,
                         lo: float = SCORE_LO_THRESHOLD) -> int:
    """1 if the in-band relevance mass fraction reaches hi, 2 if it reaches
    lo, else 3; degenerate maps score worst-case 3."""
    if not 0.0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    if maps.degenerate_image:
        return 3
    heat = upsample_heatmap(maps.patch_relevance, config)
    mask = np.asarray(band_mask, dtype=bool)
    if mask.shape != heat.shape:
        raise ValueError(f"band mask dims {mask.shape} != heatmap {heat.shape}")
    total = float(heat.sum())
    if total <= 0.0:
        return 3
    fraction = float(heat[mask].sum()) / total
    if fraction >= hi:
        return 1
    if fraction >= lo:
        return 2
    return 3


@dataclass(frozen=True)
class AgreementRecord:
    case_id: str
    alpha_image: int
    alpha_table: float
    rater: str
    timestamp: str

    def __post_init__(self) -> None:
        if self.alpha_image not in (1, 2, 3):
            raise ValueError(f"alpha_image must be 1, 2 or 3, "
                             f"got {self.alpha_image}")
        if not -1.0 <= self.alpha_table <= 1.0:
            raise ValueError(f"alpha_table must lie in [-1, 1], "
                             f"got {self.alpha_table}")


SCORES_HEADER = ("case_id", "alpha_image", "rater", "timestamp")


def write_scores_csv(rows, path) -> None:
    """rows: (case_id, alpha_image, rater, timestamp) tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        writer.writerows(rows)


def ingest_scores(path, maps_by_case: dict, ranking,
                  known_case_ids=None) -> tuple:
    """Parse a scores file and pair each alpha_image with the alpha_table
    recomputed from the stored map and the active ranking.

    Duplicate case rows keep the last occurrence and warn. Returns
    (records by case_id, full-coverage flag over known_case_ids).
    """
    names = _check_permutation(ranking)
    known = set(known_case_ids) if known_case_ids is not None else set(maps_by_case)
    records = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(SCORES_HEADER):
            raise ValueError(f"{path}: expected header "
                             f"{','.join(SCORES_HEADER)}")
        for row in reader:
            case_id = row["case_id"]
            if case_id not in known:
                raise ValueError(f"{path}: unknown case {case_id!r}")
            if case_id not in maps_by_case:
                raise ValueError(f"{path}: no stored map for {case_id!r}")
            raw_score = (row["alpha_image"] or "").strip()
            if not raw_score:
                raise ValueError(f"{path}: missing score for {case_id!r}")
            if case_id in records:
                warnings.warn(f"duplicate score for {case_id}; keeping the "
                              f"later row", stacklevel=2)
            alpha_table = ranking_agreement(
                attention_ranking(maps_by_case[case_id].feature_relevance),
                names)
            records[case_id] = AgreementRecord(
                case_id=case_id, alpha_image=int(raw_score),
                alpha_table=alpha_table, rater=row["rater"],
                timestamp=row["timestamp"])
    return records, set(records) == known


__all__ = [
    "AgreementRecord", "FEATURE_NAMES", "attention_ranking",
    "ingest_scores", "load_ranking", "pearson", "ranking_agreement",
    "ranking_to_ranks", "save_ranking", "simulate_image_score", "spearman",
    "write_scores_csv",
]
