"""Numeric kernels for the segmentation network, with hand-written adjoints.

Every operation is a pure function: forward kernels map arrays to arrays,
and each `*_backward` recomputes what it needs from the original inputs
instead of relying on hidden caches. Convolutions are evaluated as a sum
of shifted slices times per-offset weight matrices, which keeps the work
inside BLAS matmuls without materializing an im2col buffer.

All kernels preserve the input dtype, so the same code path serves
float32 production runs and float64 gradient checks.
"""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .errors import ContractViolation
from .tensor import LayerParams, Tensor, TensorLike, as_array, as_tensor

FOREGROUND_CLASSES = (1, 2)  # class order: background, axon, myelin


def _require_nchw(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise ContractViolation(f"{op}: expected (N, C, H, W) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(input: TensorLike, params: LayerParams) -> Tensor:
    """Cross-correlation of a (N, C_in, H, W) batch with params.weights plus bias.

    Output spatial dims follow floor((H + 2p - kH)/s) + 1.
    """
    x = as_array(input)
    w = params.weights.data
    b = params.bias.data
    _require_nchw(x, "conv2d")
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(
            f"conv2d: input channels {x.shape[1]} != kernel C_in {w.shape[1]} "
            f"(input {x.shape}, weights {w.shape})"
        )
    return Tensor(_conv2d_raw(x, w, b, params.stride, params.padding))


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, cin, h, wd = x_shape
    cout, _, kh, kw = w_shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ContractViolation(
            f"conv2d: padded spatial dims ({hp}, {wp}) smaller than kernel ({kh}, {kw})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return n, cin, cout, kh, kw, hp, wp, ho, wo


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv2d_raw(x, w, b, stride, padding):
    n, cin, cout, kh, kw, hp, wp, ho, wo = _conv_geometry(x.shape, w.shape, stride, padding)
    xp = _pad_input(x, padding)
    s = stride
    acc = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            acc += np.tensordot(w[:, :, i, j], view, axes=([1], [1]))
    y = acc.transpose(1, 0, 2, 3)
    y += b.reshape(1, -1, 1, 1)
    return y


def conv2d_backward(
    input: TensorLike, params: LayerParams, grad_out: TensorLike
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of a scalar loss through conv2d.

    Returns (grad_input, grad_weights, grad_bias) for the given cotangent.
    """
    x = as_array(input)
    w = params.weights.data
    gy = as_array(grad_out)
    n, cin, cout, kh, kw, hp, wp, ho, wo = _conv_geometry(
        x.shape, w.shape, params.stride, params.padding
    )
    if gy.shape != (n, cout, ho, wo):
        raise ContractViolation(
            f"conv2d_backward: grad_out shape {gy.shape} != expected {(n, cout, ho, wo)}"
        )
    s, p = params.stride, params.padding
    xp = _pad_input(x, p)
    gw = np.zeros_like(w)
    gxp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            gw[:, :, i, j] = np.tensordot(gy, view, axes=([0, 2, 3], [0, 2, 3]))
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (n, ho, wo, cin)
            gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(0, 3, 1, 2)
    gb = gy.sum(axis=(0, 2, 3))
    gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
    return Tensor(gx), Tensor(gw), Tensor(gb)


# ---------------------------------------------------------------------------
# resampling inside the network (fixed 2x factors; no image resampling anywhere)


def upsample2x(input: TensorLike) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (N, C, H, W) batch."""
    x = as_array(input)
    _require_nchw(x, "upsample2x")
    return Tensor(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2x_backward(grad_out: TensorLike) -> Tensor:
    gy = as_array(grad_out)
    _require_nchw(gy, "upsample2x_backward")
    n, c, h2, w2 = gy.shape
    if h2 % 2 or w2 % 2:
        raise ContractViolation(
            f"upsample2x_backward: grad spatial dims must be even, got {(h2, w2)}"
        )
    return Tensor(gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ContractViolation(f"maxpool2x: spatial dims must be even and >= 2, got {(h, w)}")
    # window axis is row-major within each 2x2 block, so argmax ties break
    # to the first index in raster order
    return (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def maxpool2x(input: TensorLike) -> Tensor:
    x = as_array(input)
    _require_nchw(x, "maxpool2x")
    return Tensor(_pool_windows(x).max(axis=-1))


def maxpool2x_backward(input: TensorLike, grad_out: TensorLike) -> Tensor:
    x = as_array(input)
    gy = as_array(grad_out)
    win = _pool_windows(x)
    n, c, h2, w2, _ = win.shape
    if gy.shape != (n, c, h2, w2):
        raise ContractViolation(
            f"maxpool2x_backward: grad_out shape {gy.shape} != expected {(n, c, h2, w2)}"
        )
    idx = win.argmax(axis=-1)
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    gx = (
        gwin.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2 * 2, w2 * 2)
    )
    return Tensor(gx)


# ---------------------------------------------------------------------------
# pointwise / normalization


def leaky_relu(input: TensorLike, negative_slope: float = 0.01) -> Tensor:
    x = as_array(input)
    return Tensor(np.where(x > 0, x, x * x.dtype.type(negative_slope)))


def leaky_relu_backward(
    input: TensorLike, grad_out: TensorLike, negative_slope: float = 0.01
) -> Tensor:
    x = as_array(input)
    gy = as_array(grad_out)
    if gy.shape != x.shape:
        raise ContractViolation(
            f"leaky_relu_backward: grad_out shape {gy.shape} != input shape {x.shape}"
        )
    slope = x.dtype.type(negative_slope)
    return Tensor(np.where(x > 0, gy, gy * slope))


def instance_norm(input: TensorLike, epsilon: float = 1e-5) -> Tensor:
    """Normalize each (n, c) plane to mean 0, variance 1 (epsilon inside sqrt)."""
    x = as_array(input)
    _require_nchw(x, "instance_norm")
    if x.shape[2] * x.shape[3] < 2:
        raise ContractViolation(
            f"instance_norm: plane must have >= 2 pixels, got spatial dims {x.shape[2:]}"
        )
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return Tensor((x - mu) / np.sqrt(var + x.dtype.type(epsilon)))


def instance_norm_backward(
    input: TensorLike, grad_out: TensorLike, epsilon: float = 1e-5
) -> Tensor:
    x = as_array(input)
    gy = as_array(grad_out)
    if gy.shape != x.shape:
        raise ContractViolation(
            f"instance_norm_backward: grad_out shape {gy.shape} != input shape {x.shape}"
        )
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    std = np.sqrt(var + x.dtype.type(epsilon))
    xhat = (x - mu) / std
    gmean = gy.mean(axis=(2, 3), keepdims=True)
    gdot = (gy * xhat).mean(axis=(2, 3), keepdims=True)
    return Tensor((gy - gmean - xhat * gdot) / std)


def softmax(logits: TensorLike) -> Tensor:
    """Channel-axis softmax of (N, C, H, W) logits."""
    z = as_array(logits)
    _require_nchw(z, "softmax")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Tensor(e / e.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# loss


def _check_one_hot(t: np.ndarray) -> None:
    if not np.all((t == 0) | (t == 1)):
        raise ContractViolation("dice_ce_loss: target must be one-hot (entries 0/1)")
    if not np.all(t.sum(axis=1) == 1):
        raise ContractViolation("dice_ce_loss: target channel sums must equal 1 at every pixel")


def dice_ce_loss(
    logits: TensorLike,
    target: TensorLike,
    class_weights: Optional[Iterable[float]] = None,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
    smooth: float = 1e-6,
) -> Tuple[float, Tensor]:
    """Compound loss: weighted cross-entropy plus (1 - mean foreground soft Dice).

    Returns the scalar loss and its gradient with respect to the logits.
    `class_weights` (len C) weights the cross-entropy term per class; the
    Dice term always averages the foreground classes unweighted.
    """
    z = as_array(logits)
    t = as_array(target)
    _require_nchw(z, "dice_ce_loss")
    if z.shape != t.shape:
        raise ContractViolation(
            f"dice_ce_loss: logits shape {z.shape} != target shape {t.shape}"
        )
    if z.shape[1] != 3:
        raise ContractViolation(f"dice_ce_loss: expected 3 classes, got {z.shape[1]}")
    _check_one_hot(t)
    dtype = z.dtype
    if class_weights is None:
        w = np.ones(z.shape[1], dtype=dtype)
    else:
        w = np.asarray(list(class_weights), dtype=dtype)
        if w.shape != (z.shape[1],):
            raise ContractViolation(
                f"dice_ce_loss: class_weights length {w.shape} != C={z.shape[1]}"
            )

    p = softmax(z).data

    # cross-entropy with per-class weights, normalized by the total pixel weight
    wc = w.reshape(1, -1, 1, 1)
    pix_w = (wc * t).sum(axis=1)  # (N, H, W), weight of each pixel's true class
    norm = pix_w.sum()
    logp = np.log(np.clip(p, np.finfo(dtype).tiny, None))
    ce = -(wc * t * logp).sum() / norm
    gz = (p * pix_w[:, None] - wc * t) / norm
    gz *= dtype.type(ce_weight)

    # soft Dice over foreground classes, batch-aggregated sums
    dice_terms = []
    gp = np.zeros_like(p)
    n_fg = len(FOREGROUND_CLASSES)
    for c in FOREGROUND_CLASSES:
        s_c = (p[:, c] * t[:, c]).sum()
        u_c = p[:, c].sum() + t[:, c].sum()
        denom = u_c + smooth
        dice_c = (2.0 * s_c + smooth) / denom
        dice_terms.append(dice_c)
        # d(1 - mean dice)/dp_c = -(2*t - dice_c)/ (n_fg * denom)
        gp[:, c] = -(2.0 * t[:, c] - dice_c) / (n_fg * denom)
    dice_loss = 1.0 - float(np.mean(dice_terms))

    # chain the Dice gradient through the softmax
    inner = (gp * p).sum(axis=1, keepdims=True)
    gz += dtype.type(dice_weight) * (p * (gp - inner))

    loss = float(ce_weight) * float(ce) + float(dice_weight) * dice_loss
    return loss, Tensor(gz)


# ---------------------------------------------------------------------------
# optimizer


ParamSet = Union[Dict[str, Tensor], Iterable[Tuple[str, Tensor]]]


def sgd_step(
    params: ParamSet,
    lr: float,
    momentum: float,
    velocities: Dict[str, np.ndarray],
) -> None:
    """Heavy-ball SGD update, in place.

    velocity <- momentum * velocity + grad; param <- param - lr * velocity.
    `velocities` persists across steps (pass the same dict every call;
    missing entries start at zero). Raises naming the layer on non-finite
    gradients.
    """
    if lr <= 0:
        raise ContractViolation(f"sgd_step: lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ContractViolation(f"sgd_step: momentum must be in [0, 1), got {momentum}")
    items = params.items() if isinstance(params, dict) else params
    for name, tensor in items:
        g = tensor.grad
        if g is None:
            raise ContractViolation(f"sgd_step: parameter '{name}' has no gradient")
        if not np.all(np.isfinite(g)):
            raise ContractViolation(f"sgd_step: non-finite gradient in parameter '{name}'")
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        v = momentum * v + g
        velocities[name] = v
        tensor.data -= lr * v
