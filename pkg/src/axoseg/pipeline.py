"""Preprocessing and patch sampling.

Two fixed preprocessing rules: reduce to grayscale, then min-max normalize
into [0, 1]. Nothing here resamples by pixel size or even sees it; patches
are cut from images at native resolution, whatever that resolution is.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import ContractViolation, DataError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Reduce 3-channel input by luma weights; single-channel passes through."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0].astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
        return arr.astype(np.float64) @ w
    raise DataError(
        f"to_grayscale: expected (H, W) or (H, W, 1|3) input, got shape {arr.shape}"
    )


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling into [0, 1]; constant images map to zeros."""
    arr = np.asarray(image, dtype=np.float64)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def preprocess(image: np.ndarray) -> np.ndarray:
    return normalize(to_grayscale(image))


def one_hot_target(axon: np.ndarray, myelin: np.ndarray) -> np.ndarray:
    """(3, H, W) float32 one-hot over background/axon/myelin."""
    axon = np.asarray(axon, dtype=bool)
    myelin = np.asarray(myelin, dtype=bool)
    if axon.shape != myelin.shape:
        raise ContractViolation(
            f"one_hot_target: axon shape {axon.shape} != myelin shape {myelin.shape}"
        )
    if (axon & myelin).any():
        raise ContractViolation("one_hot_target: axon and myelin masks overlap")
    t = np.zeros((3,) + axon.shape, dtype=np.float32)
    t[0] = ~(axon | myelin)
    t[1] = axon
    t[2] = myelin
    return t


def _pad_to_patch(image: np.ndarray, target: np.ndarray, ph: int, pw: int):
    h, w = image.shape
    if h >= ph and w >= pw:
        return image, target
    pad_h = max(0, ph - h)
    pad_w = max(0, pw - w)
    if pad_h >= h or pad_w >= w:
        raise DataError(
            f"image {h}x{w} is too small to pad to a {ph}x{pw} patch"
        )
    image = np.pad(image, ((0, pad_h), (0, pad_w)), mode="reflect")
    # padding must never invent foreground: padded target is pure background
    tpad = np.zeros((3, h + pad_h, w + pad_w), dtype=target.dtype)
    tpad[0] = 1.0
    tpad[:, :h, :w] = target
    return image, tpad


def sample_patch(
    image: np.ndarray,
    target: np.ndarray,
    patch_size: Tuple[int, int],
    rng: np.random.Generator,
    foreground_bias: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Cut a random (ph, pw) patch from a preprocessed image/target pair.

    The top-left corner is uniform over all valid positions. With
    foreground_bias > 0, that fraction of draws instead centers the patch
    on a random foreground pixel (clamped into bounds) to counter class
    imbalance. Images smaller than the patch are reflect-padded (targets
    background-padded). No resampling, ever.
    """
    ph, pw = patch_size
    if image.ndim != 2 or target.ndim != 3 or target.shape[0] != 3:
        raise ContractViolation(
            f"sample_patch: expected (H, W) image and (3, H, W) target, "
            f"got {image.shape} and {target.shape}"
        )
    if image.shape != target.shape[1:]:
        raise ContractViolation(
            f"sample_patch: image {image.shape} vs target spatial {target.shape[1:]}"
        )
    image, target = _pad_to_patch(image, target, ph, pw)
    h, w = image.shape
    biased = foreground_bias > 0 and rng.random() < foreground_bias
    if biased:
        fg = np.argwhere(target[1] + target[2] > 0)
        biased = fg.size > 0
    if biased:
        cy, cx = fg[rng.integers(len(fg))]
        top = int(np.clip(cy - ph // 2, 0, h - ph))
        left = int(np.clip(cx - pw // 2, 0, w - pw))
    else:
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
    return (
        image[top : top + ph, left : left + pw].copy(),
        target[:, top : top + ph, left : left + pw].copy(),
    )


def augment(
    image_patch: np.ndarray,
    target_patch: np.ndarray,
    rng: np.random.Generator,
    p_flip_h: float = 0.5,
    p_flip_v: float = 0.5,
    p_rot: float = 0.5,
    p_intensity: float = 0.5,
    max_scale: float = 0.1,
    max_shift: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random flips/rotations applied identically to image and target, plus
    a mild intensity scale/shift on the image only, clamped to [0, 1].

    All probabilities zero -> identity. rng draws happen for every branch so
    the stream advances identically regardless of which transforms fire.
    """
    img, tgt = image_patch, target_patch
    draws = rng.random(4)
    if draws[0] < p_flip_h:
        img = img[:, ::-1]
        tgt = tgt[:, :, ::-1]
    if draws[1] < p_flip_v:
        img = img[::-1, :]
        tgt = tgt[:, ::-1, :]
    if draws[2] < p_rot:
        # non-square patches only admit the shape-preserving half turn
        k = int(rng.integers(1, 4)) if img.shape[0] == img.shape[1] else 2
        img = np.rot90(img, k, axes=(0, 1))
        tgt = np.rot90(tgt, k, axes=(1, 2))
    if draws[3] < p_intensity:
        scale = 1.0 + rng.uniform(-max_scale, max_scale)
        shift = rng.uniform(-max_shift, max_shift)
        img = np.clip(img * scale + shift, 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(tgt)
