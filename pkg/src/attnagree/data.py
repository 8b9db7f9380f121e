"""Synthetic dataset generation, volume/manifest I/O, and preprocessing.

Axis conventions: voxel arrays are indexed [z, y, x]; public metadata (dims,
spacing, file headers) uses (H, W, T) = (y, x, z) order. Functions that take
voxel coordinates name them explicitly (cz, cy, cx).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import backend

MANIFEST_SCHEMA_VERSION = 1
VOLUME_MAGIC = b"MMTV"
VOLUME_VERSION = 1


# ---- tabular schema ----

@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str                      # "numeric" | "categorical"
    cardinality: int = 0           # categories for categorical features
    base_mean: float = 0.0
    base_sd: float = 1.0
    node_length: bool = False


FEATURE_SCHEMA: tuple[FeatureSpec, ...] = (
    FeatureSpec("sex", "categorical", cardinality=2),
    FeatureSpec("age", "numeric", base_mean=62.0, base_sd=11.0),
    FeatureSpec("height", "numeric", base_mean=163.0, base_sd=9.0),
    FeatureSpec("weight", "numeric", base_mean=60.0, base_sd=12.0),
    FeatureSpec("bmi", "numeric", base_mean=22.5, base_sd=3.5),
    FeatureSpec("tumor_origin", "categorical", cardinality=4),
    FeatureSpec("tumor_morphology", "categorical", cardinality=6),
    FeatureSpec("tumor_depth", "categorical", cardinality=7),
    FeatureSpec("marker_cea", "numeric", base_mean=4.0, base_sd=3.0),
    FeatureSpec("marker_ca199", "numeric", base_mean=20.0, base_sd=15.0),
    FeatureSpec("tumor_len_max", "numeric", base_mean=40.0, base_sd=12.0),
    FeatureSpec("node_right_len_max", "numeric", base_mean=6.0, base_sd=3.0, node_length=True),
    FeatureSpec("node_left_len_max", "numeric", base_mean=6.0, base_sd=3.0, node_length=True),
    FeatureSpec("node_central_len_max", "numeric", base_mean=7.0, base_sd=3.0, node_length=True),
    FeatureSpec("tumor_len_min", "numeric", base_mean=30.0, base_sd=10.0),
    FeatureSpec("node_right_len_min", "numeric", base_mean=4.0, base_sd=2.0, node_length=True),
    FeatureSpec("node_left_len_min", "numeric", base_mean=4.0, base_sd=2.0, node_length=True),
    FeatureSpec("node_central_len_min", "numeric", base_mean=5.0, base_sd=2.0, node_length=True),
)

FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in FEATURE_SCHEMA)

# Label effect per feature, in units of that feature's base sd (latent sd for
# categoricals). Distinct values: descending order is the ground-truth
# importance ranking. Node measurements dominate by construction.
BASE_EFFECT_SIZES: dict[str, float] = {
    "node_right_len_max": 1.60,
    "node_left_len_max": 1.50,
    "node_central_len_max": 1.40,
    "node_right_len_min": 1.30,
    "node_left_len_min": 1.20,
    "node_central_len_min": 1.10,
    "marker_cea": 0.80,
    "marker_ca199": 0.70,
    "tumor_depth": 0.60,
    "tumor_len_max": 0.50,
    "tumor_len_min": 0.45,
    "tumor_morphology": 0.35,
    "tumor_origin": 0.30,
    "bmi": 0.22,
    "weight": 0.18,
    "age": 0.15,
    "height": 0.10,
    "sex": 0.05,
}

SPLIT_TAGS = ("pretrain-extra", "train", "validation", "test")


# ---- volume container and file codec ----

@dataclass
class Volume:
    voxels: np.ndarray                                 # (T, H, W), float64
    spacing: tuple[float, float, float]                # mm per voxel, (H, W, T)
    bbox: tuple[int, int, int, int, int, int]          # (y0, y1, x0, x1, z0, z1), half-open

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels must be finite")
        t, h, w = self.voxels.shape
        y0, y1, x0, x1, z0, z1 = self.bbox
        if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w and 0 <= z0 < z1 <= t):
            raise ValueError(f"bbox {self.bbox} outside dims {(h, w, t)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(H, W, T)."""
        t, h, w = self.voxels.shape
        return (h, w, t)

    def bbox_center(self) -> tuple[int, int, int]:
        """(cz, cy, cx) in voxel coordinates."""
        y0, y1, x0, x1, z0, z1 = self.bbox
        return ((z0 + z1) // 2, (y0 + y1) // 2, (x0 + x1) // 2)


_HEADER = struct.Struct("<4sI3I3f6I")


def write_volume(vol: Volume, path) -> None:
    h, w, t = vol.dims
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, h, w, t,
                          *[float(s) for s in vol.spacing], *vol.bbox)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.voxels.astype("<f8", copy=False).tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, h, w, t, sh, sw, st, *bbox = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * h * w * t
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    voxels = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(t, h, w)
    return Volume(voxels=voxels.copy(), spacing=(sh, sw, st), bbox=tuple(bbox))


# ---- preprocessing ----

def normalize_volume(vol: Volume) -> Volume:
    """Z-score over the whole volume; errors on constant input."""
    sd = float(vol.voxels.std())
    if sd == 0.0:
        raise ValueError("constant volume: zero variance")
    vox = (vol.voxels - vol.voxels.mean()) / sd
    return Volume(voxels=vox, spacing=vol.spacing, bbox=vol.bbox)


def resample_volume(vol: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Trilinear resample onto target voxel spacing; rescales bbox coords."""
    sh, sw, st = vol.spacing
    th, tw, tt = target_spacing
    if min(th, tw, tt) <= 0:
        raise ValueError("target spacing must be positive")
    if (sh, sw, st) == (th, tw, tt):
        return vol
    h, w, t = vol.dims
    out_h = max(1, round(h * sh / th))
    out_w = max(1, round(w * sw / tw))
    out_t = max(1, round(t * st / tt))
    # scale = output voxel pitch in input-voxel units, per array axis (z, y, x)
    scale_z, scale_y, scale_x = tt / st, th / sh, tw / sw
    vox = backend.trilinear_resample(vol.voxels, out_t, out_h, out_w,
                                     scale_z, scale_y, scale_x)
    y0, y1, x0, x1, z0, z1 = vol.bbox
    bbox = (
        min(int(np.floor(y0 / scale_y)), out_h - 1),
        min(int(np.ceil(y1 / scale_y)), out_h),
        min(int(np.floor(x0 / scale_x)), out_w - 1),
        min(int(np.ceil(x1 / scale_x)), out_w),
        min(int(np.floor(z0 / scale_z)), out_t - 1),
        min(int(np.ceil(z1 / scale_z)), out_t),
    )
    bbox = (bbox[0], max(bbox[1], bbox[0] + 1), bbox[2], max(bbox[3], bbox[2] + 1),
            bbox[4], max(bbox[5], bbox[4] + 1))
    return Volume(voxels=vox, spacing=target_spacing, bbox=bbox)


def crop_at(voxels: np.ndarray, center_zyx: tuple[int, int, int],
            crop_hwt: tuple[int, int, int]) -> np.ndarray:
    """Crop of (H, W, T) voxels centred at (cz, cy, cx); zero-padded at borders."""
    ch, cw, ct = crop_hwt
    out = np.zeros((ct, ch, cw), dtype=np.float64)
    starts = [center_zyx[0] - ct // 2, center_zyx[1] - ch // 2, center_zyx[2] - cw // 2]
    src_slices = []
    dst_slices = []
    for axis, (start, size) in enumerate(zip(starts, (ct, ch, cw))):
        src_lo = max(start, 0)
        src_hi = min(start + size, voxels.shape[axis])
        if src_lo >= src_hi:
            return out  # crop entirely outside
        src_slices.append(slice(src_lo, src_hi))
        dst_slices.append(slice(src_lo - start, src_hi - start))
    out[tuple(dst_slices)] = voxels[tuple(src_slices)]
    return out


def preprocess(vol: Volume, target_spacing: tuple[float, float, float],
               crop_hwt: tuple[int, int, int]) -> np.ndarray:
    """Z-score, resample to target spacing, crop centred on the bbox."""
    prepared = resample_volume(normalize_volume(vol), target_spacing)
    return crop_at(prepared.voxels, prepared.bbox_center(), crop_hwt)


# ---- node band mask ----

def node_band_mask(vol: Volume, offset: int, width: int,
                   half_h: int, half_t: int) -> np.ndarray:
    """Two parasagittal slabs flanking the lesion bbox.

    Slabs sit at x = cx +/- [offset, offset + width), limited to a band of
    +/- half_h rows and +/- half_t slices around the bbox center.
    """
    t, h, w = vol.voxels.shape
    cz, cy, cx = vol.bbox_center()
    mask = np.zeros((t, h, w), dtype=bool)
    y_lo, y_hi = max(cy - half_h, 0), min(cy + half_h + 1, h)
    z_lo, z_hi = max(cz - half_t, 0), min(cz + half_t + 1, t)
    for x_lo, x_hi in ((cx - offset - width, cx - offset), (cx + offset + 1, cx + offset + width + 1)):
        x_lo, x_hi = max(x_lo, 0), min(x_hi, w)
        if x_lo < x_hi:
            mask[z_lo:z_hi, y_lo:y_hi, x_lo:x_hi] = True
    if not mask.any():
        raise ValueError("node band mask is empty; check band geometry vs dims")
    return mask


# ---- generator ----

@dataclass
class GenConfig:
    n_train: int = 160
    n_validation: int = 40
    n_test: int = 60
    n_pretrain_extra: int = 24
    vol_h: int = 48
    vol_w: int = 48
    vol_t: int = 24
    spacing: tuple[float, float, float] = (0.72, 0.72, 3.0)
    positive_rate: float = 0.5
    noise_sd: float = 1.0
    lesion_amp_lo: float = 2.0
    lesion_amp_hi: float = 3.5
    bbox_half_h: int = 6
    bbox_half_w: int = 6
    bbox_half_t: int = 3
    band_offset: int = 10
    band_width: int = 5
    band_half_h: int = 10
    band_half_t: int = 6
    node_amp_lo: float = 1.2
    node_amp_hi: float = 3.6
    node_blobs_lo: int = 1
    node_blobs_hi: int = 3
    benign_rate: float = 0.8
    benign_amp_lo: float = 0.6
    benign_amp_hi: float = 1.5
    distractor_rate: float = 0.35
    tabular_effect_scale: float = 0.9

    def validate(self) -> None:
        for name in ("n_train", "n_validation", "n_test", "n_pretrain_extra"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must be in [0, 1]")
        if not 0.0 <= self.benign_rate <= 1.0:
            raise ValueError("benign_rate must be in [0, 1]")
        if not 0.0 <= self.benign_amp_lo <= self.benign_amp_hi:
            raise ValueError("benign amplitude range must satisfy 0 <= lo <= hi")
        half_w = self.vol_w // 2
        if self.band_offset + self.band_width >= half_w:
            raise ValueError("node band does not fit inside the volume")

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "validation": self.n_validation,
                "test": self.n_test, "pretrain-extra": self.n_pretrain_extra}


def effect_sizes(cfg: GenConfig) -> dict[str, float]:
    return {k: v * cfg.tabular_effect_scale for k, v in BASE_EFFECT_SIZES.items()}


def _add_blob(vox: np.ndarray, cz: float, cy: float, cx: float,
              sz: float, sy: float, sx: float, amp: float) -> None:
    t, h, w = vox.shape
    z, y, x = np.ogrid[0:t, 0:h, 0:w]
    vox += amp * np.exp(-(((z - cz) / sz) ** 2 + ((y - cy) / sy) ** 2
                          + ((x - cx) / sx) ** 2) / 2.0)


def _sample_features(rng: np.random.Generator, label: int,
                     effects: dict[str, float]) -> dict[str, float | int]:
    values: dict[str, float | int] = {}
    for spec in FEATURE_SCHEMA:
        eff = effects[spec.name] * label
        if spec.kind == "numeric":
            v = spec.base_mean + spec.base_sd * (rng.normal() + eff)
            if spec.node_length or spec.name.startswith(("marker", "tumor_len")):
                v = max(v, 0.0)
            values[spec.name] = float(v)
        else:
            # latent threshold model: the label shifts mass to higher codes
            latent = rng.normal() + eff
            edges = _category_edges(spec.cardinality)
            values[spec.name] = int(np.searchsorted(edges, latent))
    return values


def _category_edges(cardinality: int) -> np.ndarray:
    # standard normal quantiles giving equal base probabilities
    probs = np.arange(1, cardinality) / cardinality
    return np.sqrt(2.0) * _erfinv_vec(2.0 * probs - 1.0)


def _erfinv_vec(y: np.ndarray) -> np.ndarray:
    # Winitzki's approximation refined by two Newton steps; plenty for binning
    a = 0.147
    ln_term = np.log(1.0 - y * y)
    first = 2.0 / (np.pi * a) + ln_term / 2.0
    x = np.sign(y) * np.sqrt(np.sqrt(first ** 2 - ln_term / a) - first)
    for _ in range(2):
        err = _erf_vec(x) - y
        x = x - err / (2.0 / np.sqrt(np.pi) * np.exp(-x * x))
    return x


def _erf_vec(x: np.ndarray) -> np.ndarray:
    # Abramowitz-Stegun 7.1.26, sign-symmetric
    sign = np.sign(x)
    ax = np.abs(x)
    t = 1.0 / (1.0 + 0.3275911 * ax)
    poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741
               + t * (-1.453152027 + t * 1.061405429))))
    return sign * (1.0 - poly * np.exp(-ax * ax))


def _generate_case(cfg: GenConfig, seed: int, index: int, split: str,
                   effects: dict[str, float]) -> tuple[Volume, dict, int]:
    rng = np.random.default_rng([seed, index])
    label = int(rng.random() < cfg.positive_rate)

    t, h, w = cfg.vol_t, cfg.vol_h, cfg.vol_w
    vox = rng.normal(0.0, cfg.noise_sd, size=(t, h, w))

    cz = t // 2 + int(rng.integers(-1, 2))
    cy = h // 2 + int(rng.integers(-2, 3))
    cx = w // 2 + int(rng.integers(-2, 3))
    hh = cfg.bbox_half_h + int(rng.integers(0, 2))
    hw = cfg.bbox_half_w + int(rng.integers(0, 2))
    ht = cfg.bbox_half_t + int(rng.integers(0, 2))
    bbox = (max(cy - hh, 0), min(cy + hh + 1, h),
            max(cx - hw, 0), min(cx + hw + 1, w),
            max(cz - ht, 0), min(cz + ht + 1, t))

    amp = rng.uniform(cfg.lesion_amp_lo, cfg.lesion_amp_hi)
    _add_blob(vox, cz, cy, cx, ht * 0.5, hh * 0.5, hw * 0.5, amp)

    # vol.voxels aliases vox; the node/distractor blobs below write through
    vol = Volume(voxels=vox, spacing=cfg.spacing, bbox=bbox)
    band = node_band_mask(vol, cfg.band_offset, cfg.band_width,
                          cfg.band_half_h, cfg.band_half_t)
    band_voxels = np.argwhere(band)

    signal = rng.uniform(cfg.node_amp_lo, cfg.node_amp_hi)
    if label == 1:
        n_blobs = int(rng.integers(cfg.node_blobs_lo, cfg.node_blobs_hi + 1))
        for _ in range(n_blobs):
            bz, by, bx = band_voxels[rng.integers(len(band_voxels))]
            _add_blob(vox, bz, by, bx, 0.9, 1.6, 1.6, signal * rng.uniform(0.8, 1.2))
    elif rng.random() < cfg.benign_rate:
        # faint in-band texture on some negatives, so mere band brightness
        # never separates the classes on its own
        for _ in range(int(rng.integers(1, 3))):
            bz, by, bx = band_voxels[rng.integers(len(band_voxels))]
            _add_blob(vox, bz, by, bx, 0.9, 1.6, 1.6,
                      rng.uniform(cfg.benign_amp_lo, cfg.benign_amp_hi))

    if rng.random() < cfg.distractor_rate:
        # confuser blobs outside the band and outside the lesion bbox, but
        # within the region a centred crop can see
        for _ in range(int(rng.integers(1, 3))):
            for _attempt in range(50):
                dz = cz + int(rng.integers(-6, 7))
                dy = cy + int(rng.integers(-14, 15))
                dx = cx + int(rng.integers(-14, 15))
                if not (0 <= dz < t and 0 <= dy < h and 0 <= dx < w):
                    continue
                in_band = band[dz, dy, dx]
                in_bbox = (bbox[0] <= dy < bbox[1] and bbox[2] <= dx < bbox[3]
                           and bbox[4] <= dz < bbox[5])
                if not in_band and not in_bbox:
                    _add_blob(vox, dz, dy, dx, 0.9, 1.6, 1.6,
                              signal * rng.uniform(0.6, 1.0))
                    break

    missing = split == "pretrain-extra"
    if missing:
        features: dict[str, Optional[float]] = {name: None for name in FEATURE_NAMES}
    else:
        features = _sample_features(rng, label, effects)
    record = {
        "case_id": f"case_{index:04d}",
        "volume": f"volumes/case_{index:04d}.mmtv",
        "features": features,
        "label": label,
        "split": split,
        "missing_tabular": missing,
    }
    return vol, record, label


def generate_dataset(cfg: GenConfig, seed: int, out_dir,
                     config_hash: str = "") -> dict:
    """Writes volumes/ and manifest.json under out_dir; returns the manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    try:
        vol_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output dir {out_dir}: {exc}") from exc

    effects = effect_sizes(cfg)
    order: list[str] = []
    for split in ("train", "validation", "test", "pretrain-extra"):
        order.extend([split] * cfg.counts()[split])

    cases = []
    for index, split in enumerate(order):
        vol, record, _label = _generate_case(cfg, seed, index, split, effects)
        write_volume(vol, out_dir / record["volume"])
        cases.append(record)

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config_hash": config_hash,
        "seed": seed,
        "gen": {
            "counts": cfg.counts(),
            "dims": [cfg.vol_h, cfg.vol_w, cfg.vol_t],
            "spacing": list(cfg.spacing),
            "positive_rate": cfg.positive_rate,
            "band": {"offset": cfg.band_offset, "width": cfg.band_width,
                     "half_h": cfg.band_half_h, "half_t": cfg.band_half_t},
        },
        "feature_schema": [
            {"name": f.name, "kind": f.kind, "cardinality": f.cardinality}
            for f in FEATURE_SCHEMA
        ],
        "effect_sizes": effects,
        "cases": cases,
    }
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema: {manifest.get('schema_version')}")
    return manifest


def cases_for_split(manifest: dict, split: str) -> list[dict]:
    if split not in SPLIT_TAGS:
        raise ValueError(f"unknown split {split!r}")
    return [c for c in manifest["cases"] if c["split"] == split]


def pretrain_cases(manifest: dict) -> list[dict]:
    """Pretraining pool: the training split plus the incomplete extras."""
    return [c for c in manifest["cases"] if c["split"] in ("train", "pretrain-extra")]


def case_volume(manifest_dir, record: dict) -> Volume:
    return read_volume(Path(manifest_dir) / record["volume"])


def case_band_mask(manifest: dict, vol: Volume) -> np.ndarray:
    band = manifest["gen"]["band"]
    return node_band_mask(vol, band["offset"], band["width"],
                          band["half_h"], band["half_t"])


# ---- tabular encoding for the model ----

def numeric_feature_stats(cases: list[dict]) -> dict[str, tuple[float, float]]:
    """Per-feature mean/sd over complete records; sd floored to avoid div by 0."""
    stats: dict[str, tuple[float, float]] = {}
    for spec in FEATURE_SCHEMA:
        if spec.kind != "numeric":
            continue
        vals = np.array([c["features"][spec.name] for c in cases
                         if not c["missing_tabular"]], dtype=np.float64)
        if vals.size == 0:
            raise ValueError("no complete records to compute feature stats")
        stats[spec.name] = (float(vals.mean()), float(max(vals.std(), 1e-8)))
    return stats


def encode_features(features: dict, stats: dict[str, tuple[float, float]]) -> list:
    """Schema-ordered values: z-scored floats for numerics, int codes for
    categoricals. Errors on missing values; incomplete cases never reach the
    tabular branch."""
    encoded: list[float | int] = []
    for spec in FEATURE_SCHEMA:
        v = features.get(spec.name)
        if v is None:
            raise ValueError(f"feature {spec.name} is missing")
        if spec.kind == "numeric":
            mean, sd = stats[spec.name]
            encoded.append((float(v) - mean) / sd)
        else:
            code = int(v)
            if not 0 <= code < spec.cardinality:
                raise ValueError(f"{spec.name}: code {code} out of range")
            encoded.append(code)
    return encoded
