"""Test-time augmentation inference: Q stochastic crops per case through an
eval-mode forward pass, decided by the maximum positive-class probability.

Every repetition draws from its own generator keyed by (seed, case id,
repetition index), so results do not depend on case order or on how many
cases ran before.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Model
from .data import crop_at
from .training import TrainCase, hflip


def _case_stream(seed: int, case_id: str, rep: int) -> np.random.Generator:
    digest = hashlib.blake2s(case_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little"), rep])


def _aggregate(arr: np.ndarray) -> tuple[float, float, float]:
    # sum/n can land one ulp outside [min, max], which would break the exact
    # mean == max and variance == 0 contracts for constant probabilities, so
    # clamp the mean and take deviations against the clamped value
    mean = min(max(float(arr.mean()), float(arr.min())), float(arr.max()))
    variance = float(np.mean((arr - mean) ** 2))
    return mean, float(arr.max()), variance


@dataclass(frozen=True)
class InferenceResult:
    case_id: str
    split: str
    label: int
    q_probs: tuple          # per-repetition positive probabilities
    mean: float
    max_prob: float         # the decision probability
    variance: float         # population variance over repetitions
    predicted: int
    correctness: int

    def __post_init__(self) -> None:
        if not self.q_probs:
            raise ValueError("no repetition probabilities")
        probs = np.asarray(self.q_probs, dtype=np.float64)
        mean, max_prob, variance = _aggregate(probs)
        if self.mean != mean:
            raise ValueError("mean inconsistent with stored probabilities")
        if self.max_prob != max_prob:
            raise ValueError("max inconsistent with stored probabilities")
        if self.variance != variance:
            raise ValueError("variance inconsistent with stored probabilities")
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        if self.predicted != (1 if self.max_prob >= 0.5 else 0):
            raise ValueError("predicted label breaks the 0.5 threshold rule")
        if self.correctness != int(self.predicted == self.label):
            raise ValueError("correctness must equal (predicted == label)")

    @property
    def omega_prob(self) -> float:
        return self.max_prob

    @classmethod
    def from_probs(cls, case_id: str, split: str, label: int,
                   probs: Sequence[float]) -> "InferenceResult":
        arr = np.asarray(list(probs), dtype=np.float64)
        if arr.size == 0:
            raise ValueError("no repetition probabilities")
        mean, max_prob, variance = _aggregate(arr)
        predicted = 1 if max_prob >= 0.5 else 0
        return cls(case_id=case_id, split=split, label=int(label),
                   q_probs=tuple(float(p) for p in arr),
                   mean=mean, max_prob=max_prob,
                   variance=variance, predicted=predicted,
                   correctness=int(predicted == int(label)))


def _clamp_center(center: int, jitter: int, size: int, dim: int) -> int:
    lo = size // 2
    hi = dim - size + size // 2
    if lo > hi:
        raise ValueError(f"crop size {size} exceeds volume extent {dim}")
    return min(max(center + jitter, lo), hi)


def tta_predict(model: Model, case: TrainCase, q_reps: int, k_jitter: int,
                seed: int, flip: bool = True, split: str = "") -> InferenceResult:
    """Q eval-mode forwards on crops jittered up to K voxels per axis around
    the bbox center (clamped in bounds), each mirrored with probability 0.5.
    """
    if q_reps < 1:
        raise ValueError(f"q_reps must be >= 1, got {q_reps}")
    if k_jitter < 0:
        raise ValueError(f"k_jitter must be >= 0, got {k_jitter}")
    cfg = model.config
    crop_hwt = (cfg.input_h, cfg.input_w, cfg.input_t)
    vol = case.volume
    t, h, w = vol.voxels.shape
    cz, cy, cx = vol.bbox_center()
    probs = []
    for rep in range(q_reps):
        rng = _case_stream(seed, case.case_id, rep)
        jz, jy, jx = (int(j) for j in
                      rng.integers(-k_jitter, k_jitter + 1, size=3))
        center = (_clamp_center(cz, jz, cfg.input_t, t),
                  _clamp_center(cy, jy, cfg.input_h, h),
                  _clamp_center(cx, jx, cfg.input_w, w))
        crop = crop_at(vol.voxels, center, crop_hwt)
        if flip and rng.random() < 0.5:
            crop = hflip(crop)
        art = model.forward(crop, case.features)
        probs.append(art.prob_positive)
    return InferenceResult.from_probs(case.case_id, split, case.label, probs)


def infer_splits(model: Model, split_cases: dict, q_reps: int, k_jitter: int,
                 seed: int, flip: bool = True) -> list:
    """One InferenceResult per case, split by split, in manifest order."""
    results = []
    for split, cases in split_cases.items():
        for case in cases:
            results.append(tta_predict(model, case, q_reps, k_jitter, seed,
                                       flip=flip, split=split))
    return results


RESULT_FIELDS = ("case_id", "split", "label", "q_probs", "mean", "max",
                 "variance", "predicted", "correctness")


def write_results_csv(results: Sequence[InferenceResult], path,
                      config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for r in results:
            writer.writerow([r.case_id, r.split, r.label,
                             json.dumps(list(r.q_probs)), repr(r.mean),
                             repr(r.max_prob), repr(r.variance),
                             r.predicted, r.correctness])


def read_results_csv(path) -> list:
    results = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        for row in reader:
            result = InferenceResult.from_probs(
                row["case_id"], row["split"], int(row["label"]),
                json.loads(row["q_probs"]))
            stored = (float(row["mean"]), float(row["max"]),
                      float(row["variance"]), int(row["predicted"]),
                      int(row["correctness"]))
            derived = (result.mean, result.max_prob, result.variance,
                       result.predicted, result.correctness)
            if stored != derived:
                raise ValueError(f"{row['case_id']}: stored aggregates "
                                 f"disagree with stored probabilities")
            results.append(result)
    return results
