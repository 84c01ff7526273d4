"""Tiled sliding-window inference and fold ensembling.

A patch-trained network is applied to an arbitrarily large image by
sliding a tile across it, soft-maxing each tile, and blending overlaps
with normalized per-pixel weights. Accumulation runs in float64 so the
two exactness guarantees hold: a single full-image tile under uniform
blending reproduces the direct forward pass bit-for-bit, and averaging k
identical members reproduces the single member bit-for-bit.

Output dims always equal input dims; nothing here resamples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .errors import ConfigError, ContractViolation
from .unet import Model, ModelCheckpoint

BLEND_MODES = ("uniform", "gaussian")


@dataclass(frozen=True)
class TilingPlan:
    tile: int = 128
    overlap: float = 0.5
    blend: str = "gaussian"

    def __post_init__(self):
        if self.tile < 2:
            raise ConfigError(f"tile size must be >= 2, got {self.tile}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap fraction must be in [0, 1), got {self.overlap}")
        if self.blend not in BLEND_MODES:
            raise ConfigError(f"blend must be one of {BLEND_MODES}, got '{self.blend}'")


def _tile_weights(tile: int, blend: str) -> np.ndarray:
    if blend == "uniform":
        return np.ones((tile, tile), dtype=np.float64)
    sigma = tile / 8.0
    c = (tile - 1) / 2.0
    ax = np.exp(-((np.arange(tile) - c) ** 2) / (2.0 * sigma * sigma))
    return np.outer(ax, ax)


def _tile_origins(extent: int, tile: int, stride: int) -> List[int]:
    if extent <= tile:
        return [0]
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)  # force full coverage of the far edge
    return origins


def resolve_stride(plan: TilingPlan, divisor: int) -> int:
    """Stride from the overlap fraction, snapped down to the network's
    spatial divisor so every tile origin stays pooling-aligned."""
    raw = max(1, int(round(plan.tile * (1.0 - plan.overlap))))
    snapped = max(divisor, (raw // divisor) * divisor)
    return min(snapped, plan.tile)


def predict_tiled(model: Model, image: np.ndarray, plan: TilingPlan) -> np.ndarray:
    """(3, H, W) float32 probability maps for a preprocessed (H, W) image."""
    if image.ndim != 2:
        raise ContractViolation(f"predict_tiled: expected (H, W) image, got {image.shape}")
    d = model.config.spatial_divisor
    if plan.tile % d or plan.tile < d:
        raise ConfigError(
            f"tile size {plan.tile} must be a positive multiple of the network's "
            f"spatial divisor {d}"
        )
    h, w = image.shape
    tile = plan.tile
    stride = resolve_stride(plan, d)

    pad_h = max(0, tile - h)
    pad_w = max(0, tile - w)
    padded = np.pad(image, ((0, pad_h), (0, pad_w)), mode="reflect") if pad_h or pad_w else image
    hp, wp = padded.shape

    weights = _tile_weights(tile, plan.blend)
    acc = np.zeros((3, hp, wp), dtype=np.float64)
    norm = np.zeros((hp, wp), dtype=np.float64)
    x = padded.astype(np.float32, copy=False)
    for top in _tile_origins(hp, tile, stride):
        for left in _tile_origins(wp, tile, stride):
            patch = x[top : top + tile, left : left + tile]
            logits = model.forward(patch[None, None, :, :])
            probs = kernels.softmax(logits).data[0].astype(np.float64)
            acc[:, top : top + tile, left : left + tile] += probs * weights
            norm[top : top + tile, left : left + tile] += weights
    out = (acc / norm)[:, :h, :w]
    return out.astype(np.float32)


Member = Union[Model, ModelCheckpoint]


def _as_model(member: Member) -> Model:
    if isinstance(member, ModelCheckpoint):
        return member.build_model()
    return member


def ensemble_predict(members: Sequence[Member], image: np.ndarray, plan: TilingPlan) -> np.ndarray:
    """Arithmetic mean of the members' probability maps."""
    if len(members) == 0:
        raise ConfigError("ensemble_predict: empty member list")
    acc = None
    for member in members:
        probs = predict_tiled(_as_model(member), image, plan).astype(np.float64)
        acc = probs if acc is None else acc + probs
    return (acc / len(members)).astype(np.float32)


def argmax_masks(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax into disjoint binary masks; ties go to the lower
    class index (background before axon before myelin)."""
    if probs.ndim != 3 or probs.shape[0] != 3:
        raise ContractViolation(f"argmax_masks: expected (3, H, W), got {probs.shape}")
    labels = np.argmax(probs, axis=0)  # first occurrence wins ties
    return labels == 1, labels == 2
