"""Class-specific relevance maps: gradient-weighted attention accumulated
through each encoder stack, composed across the fusion stack, and rendered
as per-slice overlays.

The per-stack rule starts from the identity and folds in one gradient-clamped
attention average per block; the fusion stack's prediction-token row then
distributes relevance onto the image and table stacks. Maps use the centered
deterministic crop so repeated calls agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import crop_at
from .model import Model
from .training import TrainCase

HEAT_RGB = (255, 64, 0)


@dataclass(frozen=True)
class AttentionMaps:
    case_id: str
    target: int
    patch_relevance: np.ndarray     # (N_p,), max 1 unless degenerate_image
    feature_relevance: np.ndarray   # (N_t,), max 1 unless degenerate_table
    degenerate_image: bool
    degenerate_table: bool

    def __post_init__(self) -> None:
        if np.any(self.patch_relevance < 0) or np.any(self.feature_relevance < 0):
            raise ValueError("relevance values must be >= 0")

    @property
    def degenerate(self) -> bool:
        return self.degenerate_image or self.degenerate_table


def block_relevance(attn: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Mean over heads of the positive part of grad * attention."""
    attn = np.asarray(attn, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if attn.ndim != 3 or attn.shape != grad.shape:
        raise ValueError(f"expected matching (heads, n, n) arrays, "
                         f"got {attn.shape} and {grad.shape}")
    return np.maximum(grad * attn, 0.0).mean(axis=0)


def propagate_stack(abars: list) -> np.ndarray:
    """R starts at I; each block folds in as R <- R + Abar @ R, first block
    first."""
    if not abars:
        raise ValueError("no blocks to propagate")
    n = abars[0].shape[0]
    relevance = np.eye(n)
    for abar in abars:
        if abar.shape != (n, n):
            raise ValueError(f"block matrix shape {abar.shape} != ({n}, {n})")
        relevance = relevance + abar @ relevance
    return relevance


def _stack_abars(attention_tensors: list) -> list:
    out = []
    for tensor in attention_tensors:
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        out.append(block_relevance(tensor.data, grad))
    return out


def _normalize(values: np.ndarray) -> tuple:
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(values), True
    return values / peak, False


def explain(model: Model, case: TrainCase, target: int = 1) -> AttentionMaps:
    """Backward from the target-class logit on an eval-mode forward, then
    compose per-stack relevance into per-patch and per-feature maps."""
    if target not in (0, 1):
        raise ValueError(f"target class must be 0 or 1, got {target}")
    cfg = model.config
    crop = crop_at(case.volume.voxels, case.volume.bbox_center(),
                   (cfg.input_h, cfg.input_w, cfg.input_t))
    with ad.Tape() as tape:
        art = model.forward(crop, case.features)
        tape.backward(ad.element(art.logits, (0, target)))

    r_img = propagate_stack(_stack_abars(art.image_attention))
    r_tab = propagate_stack(_stack_abars(art.table_attention))
    r_fus = propagate_stack(_stack_abars(art.fusion_attention))

    n_p = cfg.n_patches
    n_t = cfg.n_tabular
    row = r_fus[0, :]
    # fusion positions: [image class | N_p patches | table class | N_t features]
    image_map = row[1:n_p + 1] @ r_img[1:, 1:]
    table_map = row[n_p + 2:] @ r_tab[1:, 1:]
    image_map, img_degenerate = _normalize(image_map)
    table_map, tab_degenerate = _normalize(table_map)
    return AttentionMaps(case.case_id, target, image_map, table_map,
                         img_degenerate, tab_degenerate)


def upsample_heatmap(patch_relevance: np.ndarray, config) -> np.ndarray:
    """Nearest-neighbor expansion of each patch value to its voxel block."""
    patch = config.patch
    nz = config.input_t // patch
    ny = config.input_h // patch
    nx = config.input_w // patch
    values = np.asarray(patch_relevance, dtype=np.float64)
    if values.shape != (config.n_patches,):
        raise ValueError(f"expected {config.n_patches} patch values, "
                         f"got {values.shape}")
    grid = values.reshape(nz, ny, nx)
    return grid.repeat(patch, axis=0).repeat(patch, axis=1).repeat(patch, axis=2)


def patch_index_of_voxel(z: int, y: int, x: int, config) -> int:
    """Index into the patch map for a voxel of the model input crop."""
    patch = config.patch
    ny = config.input_h // patch
    nx = config.input_w // patch
    return (z // patch) * ny * nx + (y // patch) * nx + (x // patch)


def _to_gray(slice_2d: np.ndarray) -> np.ndarray:
    lo = float(slice_2d.min())
    hi = float(slice_2d.max())
    if hi <= lo:
        return np.full(slice_2d.shape, 127.0)
    return (slice_2d - lo) / (hi - lo) * 255.0


def render_overlay_slices(crop: np.ndarray, heatmap: np.ndarray,
                          opacity: float = 0.5) -> list:
    """One RGB image per axial slice: grayscale anatomy blended toward the
    heat color with per-pixel alpha = opacity * relevance."""
    from PIL import Image

    crop = np.asarray(crop, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if crop.shape != heatmap.shape:
        raise ValueError(f"crop dims {crop.shape} != heatmap dims {heatmap.shape}")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    images = []
    for z in range(crop.shape[0]):
        gray = _to_gray(crop[z])
        alpha = opacity * np.clip(heatmap[z], 0.0, 1.0)
        rgb = np.empty(gray.shape + (3,), dtype=np.float64)
        for ch, heat in enumerate(HEAT_RGB):
            rgb[:, :, ch] = gray * (1.0 - alpha) + heat * alpha
        images.append(Image.fromarray(np.round(rgb).astype(np.uint8), "RGB"))
    return images


def save_overlays(case_id: str, crop: np.ndarray, heatmap: np.ndarray,
                  out_dir, opacity: float = 0.5) -> list:
    paths = []
    for z, image in enumerate(render_overlay_slices(crop, heatmap, opacity)):
        path = out_dir / f"{case_id}_slice_{z:02d}.png"
        image.save(path)
        paths.append(path)
    return paths


def maps_to_json_dict(maps: AttentionMaps) -> dict:
    return {
        "case_id": maps.case_id,
        "target": maps.target,
        "patch_relevance": [float(v) for v in maps.patch_relevance],
        "feature_relevance": [float(v) for v in maps.feature_relevance],
        "degenerate_image": maps.degenerate_image,
        "degenerate_table": maps.degenerate_table,
        "degenerate": maps.degenerate,
    }


def maps_from_json_dict(raw: dict) -> AttentionMaps:
    return AttentionMaps(
        raw["case_id"], int(raw["target"]),
        np.asarray(raw["patch_relevance"], dtype=np.float64),
        np.asarray(raw["feature_relevance"], dtype=np.float64),
        bool(raw["degenerate_image"]), bool(raw["degenerate_table"]))
