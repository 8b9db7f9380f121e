"""Logistic meta-models over inference statistics: predict correctness from
spread and agreement signals, report one minus that probability as the
uncertainty score.

Normalization statistics always come from the validation split; the test
split reuses them unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RIDGE = 1e-6
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
MIN_FIT_ROWS = 10

UNINFORMED_FEATURES = ("sigma_prob",)
INFORMED_FEATURES = ("sigma_prob", "alpha_image", "alpha_table")


@dataclass(frozen=True)
class MetaFeatures:
    sigma_prob: float
    alpha_image: int
    alpha_table: float
    correctness: int

    def __post_init__(self) -> None:
        if self.sigma_prob < 0:
            raise ValueError(f"sigma_prob must be >= 0, got {self.sigma_prob}")
        if self.alpha_image not in (1, 2, 3):
            raise ValueError(f"alpha_image must be 1, 2 or 3, "
                             f"got {self.alpha_image}")
        if not -1.0 <= self.alpha_table <= 1.0:
            raise ValueError(f"alpha_table must lie in [-1, 1], "
                             f"got {self.alpha_table}")
        if self.correctness not in (0, 1):
            raise ValueError(f"correctness must be 0 or 1, "
                             f"got {self.correctness}")


@dataclass(frozen=True)
class NormalizationStats:
    sigma_mean: float
    sigma_std: float
    table_mean: float
    table_std: float
    image_min: float
    image_max: float

    def __post_init__(self) -> None:
        if self.sigma_std <= 0 or self.table_std <= 0:
            raise ValueError("normalization std must be positive "
                             "(degenerate validation column)")
        if self.image_max <= self.image_min:
            raise ValueError("alpha_image has no spread on the validation "
                             "split")


def compute_stats(rows: Sequence[MetaFeatures]) -> NormalizationStats:
    """Population mean/std for the continuous columns, observed min/max for
    the ordinal score. Call this on validation rows only."""
    sigma = np.array([r.sigma_prob for r in rows], dtype=np.float64)
    table = np.array([r.alpha_table for r in rows], dtype=np.float64)
    image = np.array([r.alpha_image for r in rows], dtype=np.float64)
    return NormalizationStats(
        sigma_mean=float(sigma.mean()), sigma_std=float(sigma.std()),
        table_mean=float(table.mean()), table_std=float(table.std()),
        image_min=float(image.min()), image_max=float(image.max()))


def normalize_features(raw: MetaFeatures, stats: NormalizationStats,
                       features: Sequence[str]) -> np.ndarray:
    out = []
    for name in features:
        if name == "sigma_prob":
            out.append((raw.sigma_prob - stats.sigma_mean) / stats.sigma_std)
        elif name == "alpha_table":
            out.append((raw.alpha_table - stats.table_mean) / stats.table_std)
        elif name == "alpha_image":
            span = stats.image_max - stats.image_min
            scaled = (raw.alpha_image - stats.image_min) / span
            out.append(min(max(scaled, 0.0), 1.0))
        else:
            raise ValueError(f"unknown feature {name!r}")
    return np.array(out, dtype=np.float64)


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_logistic(x: np.ndarray, y: np.ndarray) -> tuple:
    """Ridge-penalized maximum likelihood by Newton iteration.

    Returns (weights, intercept, diagnostics). The tiny ridge keeps the
    optimum finite even on separable data; the intercept is penalized too.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"need X (n, k) and y (n,), got {x.shape}, {y.shape}")
    n = x.shape[0]
    if n < MIN_FIT_ROWS:
        raise ValueError(f"need at least {MIN_FIT_ROWS} rows, got {n}")
    if len(np.unique(y)) < 2:
        raise ValueError("correctness target is constant; nothing to fit")
    design = np.hstack([x, np.ones((n, 1))])
    k = design.shape[1]
    w = np.zeros(k)
    converged = False
    change = np.inf
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        mu = _sigmoid(design @ w)
        grad = design.T @ (y - mu) - RIDGE * w
        weights = np.maximum(mu * (1.0 - mu), 1e-12)
        hessian = (design * weights[:, None]).T @ design + RIDGE * np.eye(k)
        delta = np.linalg.solve(hessian, grad)
        w = w + delta
        change = float(np.max(np.abs(delta)))
        if change < IRLS_TOL:
            converged = True
            break
    if not converged:
        raise RuntimeError(f"logistic fit did not converge in "
                           f"{IRLS_MAX_ITER} iterations (last step {change:.3e})")
    diagnostics = {"iterations": iterations, "converged": converged,
                   "final_change": change}
    return w[:-1].copy(), float(w[-1]), diagnostics


@dataclass(frozen=True)
class EstimatorModel:
    kind: str
    features: tuple
    weights: np.ndarray
    intercept: float
    stats: NormalizationStats
    diagnostics: dict

    def __post_init__(self) -> None:
        expected = {"uninformed": UNINFORMED_FEATURES,
                    "informed": INFORMED_FEATURES}.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if tuple(self.features) != expected:
            raise ValueError(f"{self.kind} estimator must use features "
                             f"{expected}, got {tuple(self.features)}")
        if self.weights.shape != (len(expected),):
            raise ValueError(f"expected {len(expected)} weights, "
                             f"got {self.weights.shape}")


def predict_correct(model: EstimatorModel, raw: MetaFeatures) -> float:
    vec = normalize_features(raw, model.stats, model.features)
    eta = float(vec @ model.weights + model.intercept)
    return float(_sigmoid(np.array([eta]))[0])


def uncertainty_score(model: EstimatorModel, raw: MetaFeatures) -> float:
    """1 minus the estimated probability of a correct prediction."""
    return 1.0 - predict_correct(model, raw)


def _fit_kind(kind: str, features: tuple, rows: Sequence[MetaFeatures],
              stats: NormalizationStats) -> EstimatorModel:
    x = np.array([normalize_features(r, stats, features) for r in rows])
    y = np.array([r.correctness for r in rows], dtype=np.float64)
    weights, intercept, diagnostics = fit_logistic(x, y)
    return EstimatorModel(kind=kind, features=features, weights=weights,
                          intercept=intercept, stats=stats,
                          diagnostics=diagnostics)


def fit_both(validation_rows: Sequence[MetaFeatures]) -> dict:
    """Fit the single-signal and the three-signal estimators on validation
    meta-features, sharing one set of normalization statistics."""
    rows = list(validation_rows)
    stats = compute_stats(rows)
    return {
        "uninformed": _fit_kind("uninformed", UNINFORMED_FEATURES, rows, stats),
        "informed": _fit_kind("informed", INFORMED_FEATURES, rows, stats),
    }


def model_to_json_dict(model: EstimatorModel) -> dict:
    return {
        "kind": model.kind,
        "features": list(model.features),
        "weights": [float(v) for v in model.weights],
        "intercept": model.intercept,
        "stats": {
            "sigma_mean": model.stats.sigma_mean,
            "sigma_std": model.stats.sigma_std,
            "table_mean": model.stats.table_mean,
            "table_std": model.stats.table_std,
            "image_min": model.stats.image_min,
            "image_max": model.stats.image_max,
        },
        "diagnostics": dict(model.diagnostics),
    }


def model_from_json_dict(raw: dict) -> EstimatorModel:
    stats = NormalizationStats(**raw["stats"])
    return EstimatorModel(kind=raw["kind"], features=tuple(raw["features"]),
                          weights=np.asarray(raw["weights"], dtype=np.float64),
                          intercept=float(raw["intercept"]), stats=stats,
                          diagnostics=dict(raw["diagnostics"]))


def save_model(model: EstimatorModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> EstimatorModel:
    with open(path) as fh:
        return model_from_json_dict(json.load(fh))
