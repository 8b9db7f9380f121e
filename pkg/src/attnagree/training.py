"""Two-phase optimization: metric pretraining of the image branch, then
supervised training of the full model with a weighted BCE + cosine objective.

Both phases draw every random decision (shuffling, crop centers, bias fields,
flips, dropout) from generators seeded by (config seed, stream tag, epoch,
case index), so a rerun with the same config reproduces the metric trace
bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .backend import adam_update
from .data import Volume, crop_at
from .model import Model

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TRIPLET_MARGIN = 1.0
BIAS_FIELD_RANGE = 0.3

KNOWN_AUGMENTATIONS = ("bias-field", "crop", "hflip")

METRICS_FIELDS = ("epoch", "split", "loss", "bce", "cosine",
                  "accuracy", "auc", "distance_gap")

# rng stream tags; keep pretraining and training draws disjoint
_STREAM_PRETRAIN = 11
_STREAM_TRAIN = 12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    lr: float = 3e-4
    weight_decay: float = 1e-4
    bce_weight: float = 1.0
    cosine_weight: float = 10.0
    label_smoothing: float = 0.1
    augmentations: tuple = ("bias-field", "crop", "hflip")
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.bce_weight < 0 or self.cosine_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.bce_weight == 0 and self.cosine_weight == 0:
            raise ValueError("loss weights must not both be 0")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ValueError(f"label_smoothing must lie in [0, 0.5), "
                             f"got {self.label_smoothing}")
        unknown = [a for a in self.augmentations if a not in KNOWN_AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unknown augmentations: {unknown}")
        if len(set(self.augmentations)) != len(self.augmentations):
            raise ValueError("duplicate augmentation names")

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "epochs": self.epochs,
            "lr": self.lr, "weight_decay": self.weight_decay,
            "bce_weight": self.bce_weight, "cosine_weight": self.cosine_weight,
            "label_smoothing": self.label_smoothing,
            "augmentations": list(self.augmentations), "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainConfig":
        kwargs = dict(raw)
        if "augmentations" in kwargs:
            kwargs["augmentations"] = tuple(kwargs["augmentations"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# ---- losses ----

def l2_distance(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    diff = ad.sub(a, b)
    return ad.sqrt(ad.reduce_sum(ad.mul(diff, diff)))


def _hinge(d_ap: ad.Tensor, d_an: ad.Tensor) -> ad.Tensor:
    return ad.relu(ad.sadd(ad.sub(d_ap, d_an), TRIPLET_MARGIN))


def triplet_loss(anchor: ad.Tensor, positive: ad.Tensor,
                 negative: ad.Tensor) -> ad.Tensor:
    """max{d(a,p) - d(a,n) + 1, 0} with d the L2 distance, margin fixed at 1."""
    return _hinge(l2_distance(anchor, positive), l2_distance(anchor, negative))


def bce_loss(p: ad.Tensor, label: int, label_smoothing: float = 0.0) -> ad.Tensor:
    """Cross-entropy of a positive-class probability against a smoothed target.

    The target is label * (1 - eps) + eps / 2, so eps > 0 keeps the optimum
    away from saturated probabilities.
    """
    value = float(p.data)
    if not 0.0 < value < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {value}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    target = label * (1.0 - label_smoothing) + label_smoothing / 2.0
    one_minus = ad.sadd(ad.neg(p), 1.0)
    return ad.neg(ad.add(ad.smul(ad.log(p), target),
                         ad.smul(ad.log(one_minus), 1.0 - target)))


def cosine_loss(logits: ad.Tensor, label: int) -> ad.Tensor:
    """1 - cosine similarity between the logit vector and onehot(label)."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    norm = ad.sqrt(ad.reduce_sum(ad.mul(logits, logits)))
    if float(norm.data) == 0.0:
        raise ValueError("zero-norm logits have no direction")
    cos = ad.div(ad.element(logits, (0, label)), norm)
    return ad.sadd(ad.neg(cos), 1.0)


def _mean_tensors(terms: Sequence[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.smul(total, 1.0 / len(terms))


def loss_parts(batch: Sequence[tuple], label_smoothing: float = 0.0):
    """Mean BCE and mean cosine loss over (logits, label) pairs."""
    if not batch:
        raise ValueError("empty batch")
    bce_terms = []
    cos_terms = []
    for logits, label in batch:
        probs = ad.softmax(logits)
        bce_terms.append(bce_loss(ad.element(probs, (0, 1)), label, label_smoothing))
        cos_terms.append(cosine_loss(logits, label))
    return _mean_tensors(bce_terms), _mean_tensors(cos_terms)


def combined_loss(batch: Sequence[tuple], bce_weight: float = 1.0,
                  cosine_weight: float = 10.0,
                  label_smoothing: float = 0.0) -> ad.Tensor:
    bce_mean, cos_mean = loss_parts(batch, label_smoothing)
    return ad.add(ad.smul(bce_mean, bce_weight), ad.smul(cos_mean, cosine_weight))


# ---- optimizer ----

class AdamState:
    """Adam moments for a named subset of a model's parameters.

    step() consumes whatever gradients the last backward left on the
    parameters; a parameter with no gradient still sees weight decay.
    """

    def __init__(self, model: Model, names: Sequence[str]):
        if not names:
            raise ValueError("no parameters to optimize")
        unknown = [n for n in names if n not in model.params]
        if unknown:
            raise ValueError(f"unknown parameters: {unknown}")
        self.model = model
        self.names = list(names)
        self.m = {n: np.zeros_like(model.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(model.params[n].data) for n in self.names}
        self.t = 0

    def step(self, lr: float, weight_decay: float) -> None:
        self.t += 1
        for name in self.names:
            param = self.model.params[name]
            grad = param.grad
            if grad is None:
                grad = np.zeros_like(param.data)
            adam_update(param.data, np.ascontiguousarray(grad, dtype=np.float64),
                        self.m[name], self.v[name], self.t,
                        lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, weight_decay)


# ---- augmentation and triplet sampling ----

def bias_field(crop: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Multiply by exp of a degree-2 polynomial over [-1,1]^3 coordinates.

    coeffs order: (1, z, y, x, z^2, y^2, x^2, zy, zx, yx).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (10,):
        raise ValueError(f"expected 10 coefficients, got {coeffs.shape}")
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
            for n in crop.shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    basis = (np.ones_like(zz), zz, yy, xx,
             zz * zz, yy * yy, xx * xx, zz * yy, zz * xx, yy * xx)
    poly = np.zeros_like(zz)
    for c, b in zip(coeffs, basis):
        poly += c * b
    return crop * np.exp(poly)


def hflip(crop: np.ndarray) -> np.ndarray:
    return crop[:, :, ::-1].copy()


def augment(vol: Volume, crop_hwt: tuple, spec: Sequence[str],
            rng: np.random.Generator) -> np.ndarray:
    """Draw one training crop: recentred in the bbox if "crop" is requested,
    then bias-field shading, then a coin-flip mirror of the W axis.

    Draw order is fixed so the same rng always yields the same crop.
    """
    unknown = [a for a in spec if a not in KNOWN_AUGMENTATIONS]
    if unknown:
        raise ValueError(f"unknown augmentations: {unknown}")
    y0, y1, x0, x1, z0, z1 = vol.bbox
    center = vol.bbox_center()
    if "crop" in spec:
        center = (int(rng.integers(z0, z1)), int(rng.integers(y0, y1)),
                  int(rng.integers(x0, x1)))
    out = crop_at(vol.voxels, center, crop_hwt)
    if "bias-field" in spec:
        coeffs = rng.uniform(-BIAS_FIELD_RANGE, BIAS_FIELD_RANGE, size=10)
        out = bias_field(out, coeffs)
    if "hflip" in spec and rng.random() < 0.5:
        out = hflip(out)
    return out


@dataclass(frozen=True)
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self) -> None:
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ValueError("triplet crops must share dims")


def _inside(center: tuple, bbox: tuple) -> bool:
    y0, y1, x0, x1, z0, z1 = bbox
    cz, cy, cx = center
    return z0 <= cz < z1 and y0 <= cy < y1 and x0 <= cx < x1


def sample_triplet(vol: Volume, crop_hwt: tuple,
                   rng: np.random.Generator) -> Triplet:
    """Anchor at the bbox center, positive at a random voxel inside the bbox,
    negative centered strictly outside it. Crops are zero-padded at borders.
    """
    t, h, w = vol.voxels.shape
    y0, y1, x0, x1, z0, z1 = vol.bbox
    if (y1 - y0) * (x1 - x0) * (z1 - z0) >= h * w * t:
        raise ValueError("bbox covers the whole volume; no outside center exists")
    if (y1 - y0) * (x1 - x0) * (z1 - z0) < 2:
        # a single-voxel bbox forces positive == anchor, whose zero distance
        # has no usable gradient
        raise ValueError("bbox too small to sample a distinct positive center")
    anchor_center = vol.bbox_center()

    positive_center = anchor_center
    for _ in range(100):
        cand = (int(rng.integers(z0, z1)), int(rng.integers(y0, y1)),
                int(rng.integers(x0, x1)))
        if cand != anchor_center:
            positive_center = cand
            break
    else:
        for cz in range(z0, z1):
            for cy in range(y0, y1):
                for cx in range(x0, x1):
                    if (cz, cy, cx) != anchor_center:
                        positive_center = (cz, cy, cx)
                        break
                else:
                    continue
                break
            else:
                continue
            break

    negative_center: Optional[tuple] = None
    for _ in range(1000):
        cand = (int(rng.integers(0, t)), int(rng.integers(0, h)),
                int(rng.integers(0, w)))
        if not _inside(cand, vol.bbox):
            negative_center = cand
            break
    if negative_center is None:
        # deterministic fallback: step just past the bbox on some open axis
        if z0 > 0:
            negative_center = (z0 - 1, y0, x0)
        elif z1 < t:
            negative_center = (z1, y0, x0)
        elif y0 > 0:
            negative_center = (z0, y0 - 1, x0)
        elif y1 < h:
            negative_center = (z0, y1, x0)
        elif x0 > 0:
            negative_center = (z0, y0, x0 - 1)
        else:
            negative_center = (z0, y0, x1)

    return Triplet(crop_at(vol.voxels, anchor_center, crop_hwt),
                   crop_at(vol.voxels, positive_center, crop_hwt),
                   crop_at(vol.voxels, negative_center, crop_hwt))


# ---- training loops ----

@dataclass(frozen=True)
class TrainCase:
    case_id: str
    volume: Volume      # intensity-normalized and resampled; bbox in those coords
    features: list      # encoded values in schema order (empty for pretraining)
    label: int


def _crop_dims(model: Model) -> tuple:
    cfg = model.config
    return (cfg.input_h, cfg.input_w, cfg.input_t)


def pretrain(model: Model, volumes: Sequence[Volume],
             cfg: TrainConfig) -> list:
    """Triplet-margin training of the image branch only.

    Returns one metrics row per epoch (mean hinge loss and mean distance
    gap d(a,n) - d(a,p) over the epoch's samples).
    """
    cfg.validate()
    if not volumes:
        raise ValueError("empty pretraining split")
    crop_hwt = _crop_dims(model)
    state = AdamState(model, model.named_in_group("image."))
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_PRETRAIN, 0])
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(volumes))
        losses = []
        gaps = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                terms = []
                for idx in batch:
                    case_rng = np.random.default_rng(
                        [cfg.seed, _STREAM_PRETRAIN, 1 + epoch, int(idx)])
                    trip = sample_triplet(volumes[idx], crop_hwt, case_rng)
                    e_a = model.image_embedding(trip.anchor, case_rng, training=True)
                    e_p = model.image_embedding(trip.positive, case_rng, training=True)
                    e_n = model.image_embedding(trip.negative, case_rng, training=True)
                    d_ap = l2_distance(e_a, e_p)
                    d_an = l2_distance(e_a, e_n)
                    terms.append(_hinge(d_ap, d_an))
                    losses.append(float(terms[-1].data))
                    gaps.append(float(d_an.data) - float(d_ap.data))
                tape.backward(_mean_tensors(terms))
            state.step(cfg.lr, cfg.weight_decay)
            model.zero_grad()
        history.append({
            "epoch": epoch, "split": "pretrain",
            "loss": float(np.mean(losses)),
            "distance_gap": float(np.mean(gaps)),
        })
    return history


def _split_metrics(probs: Sequence[float], labels: Sequence[int]) -> dict:
    from .stats import roc_auc
    preds = [1 if p >= 0.5 else 0 for p in probs]
    acc = float(np.mean([p == y for p, y in zip(preds, labels)]))
    return {"accuracy": acc, "auc": roc_auc(list(labels), list(probs))}


def evaluate_split(model: Model, cases: Sequence[TrainCase]) -> dict:
    """Deterministic centered-crop forward over a split; loss parts plus
    accuracy and AUC at the 0.5 threshold."""
    crop_hwt = _crop_dims(model)
    pairs = []
    probs = []
    labels = []
    for case in cases:
        crop = crop_at(case.volume.voxels, case.volume.bbox_center(), crop_hwt)
        art = model.forward(crop, case.features)
        pairs.append((art.logits, case.label))
        probs.append(art.prob_positive)
        labels.append(case.label)
    bce_mean, cos_mean = loss_parts(pairs)
    row = _split_metrics(probs, labels)
    row["bce"] = float(bce_mean.data)
    row["cosine"] = float(cos_mean.data)
    return row


def train(model: Model, train_cases: Sequence[TrainCase],
          val_cases: Sequence[TrainCase], cfg: TrainConfig):
    """Full-model optimization of the weighted BCE + cosine objective.

    Keeps the parameter snapshot with the best validation AUC (first epoch
    wins ties) and restores it into the model before returning. Returns
    ({best_epoch, best_val_auc}, metrics rows).
    """
    cfg.validate()
    if not train_cases or not val_cases:
        raise ValueError("empty split")
    crop_hwt = _crop_dims(model)
    state = AdamState(model, list(model.params))
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_TRAIN, 0])
    best = {"best_epoch": -1, "best_val_auc": -np.inf}
    best_params = None
    rows = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_cases))
        epoch_bce = []
        epoch_cos = []
        train_probs = []
        train_labels = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                pairs = []
                for idx in batch:
                    case = train_cases[int(idx)]
                    case_rng = np.random.default_rng(
                        [cfg.seed, _STREAM_TRAIN, 1 + epoch, int(idx)])
                    crop = augment(case.volume, crop_hwt, cfg.augmentations,
                                   case_rng)
                    art = model.forward(crop, case.features, case_rng,
                                        training=True)
                    pairs.append((art.logits, case.label))
                    train_probs.append(art.prob_positive)
                    train_labels.append(case.label)
                bce_mean, cos_mean = loss_parts(pairs, cfg.label_smoothing)
                loss = ad.add(ad.smul(bce_mean, cfg.bce_weight),
                              ad.smul(cos_mean, cfg.cosine_weight))
                tape.backward(loss)
            epoch_bce.append(float(bce_mean.data) * len(pairs))
            epoch_cos.append(float(cos_mean.data) * len(pairs))
            state.step(cfg.lr, cfg.weight_decay)
            model.zero_grad()
        n = len(train_cases)
        train_bce = sum(epoch_bce) / n
        train_cos = sum(epoch_cos) / n
        train_row = {"epoch": epoch, "split": "train",
                     "loss": cfg.bce_weight * train_bce + cfg.cosine_weight * train_cos,
                     "bce": train_bce, "cosine": train_cos}
        train_row.update(_split_metrics(train_probs, train_labels))
        rows.append(train_row)

        val = evaluate_split(model, val_cases)
        val_row = {"epoch": epoch, "split": "validation",
                   "loss": cfg.bce_weight * val["bce"] + cfg.cosine_weight * val["cosine"],
                   "bce": val["bce"], "cosine": val["cosine"],
                   "accuracy": val["accuracy"], "auc": val["auc"]}
        rows.append(val_row)

        if val["auc"] > best["best_val_auc"]:
            best = {"best_epoch": epoch, "best_val_auc": val["auc"]}
            best_params = {name: p.data.copy()
                           for name, p in model.params.items()}

    if best_params is not None:
        for name, data in best_params.items():
            model.params[name].data[...] = data
    return best, rows


def write_metrics_csv(rows: Sequence[dict], path, config_hash: str = "") -> None:
    """One CSV row per (epoch, split); absent metrics stay blank."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_FIELDS})
