"""Dense tensors with an optional gradient slot.

A Tensor is a thin wrapper over a contiguous numpy array. Image batches
use (N, C, H, W) order. Kernels in :mod:`axoseg.kernels` accept Tensors or
raw arrays; network weights are always held as Tensors so optimizers and
checkpointing can reach their gradients.

Finite checking is off by default (it costs a full pass over the data);
enable it with `set_check_finite(True)` when debugging a diverging run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ContractViolation

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Globally toggle NaN/Inf detection on Tensor construction."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


@dataclass
class Tensor:
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ContractViolation(
                f"grad shape {self.grad.shape} != data shape {self.data.shape}"
            )
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise ContractViolation("tensor contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


TensorLike = Union[Tensor, np.ndarray]


def as_tensor(x: TensorLike) -> Tensor:
    """Coerce an array to a Tensor (no copy when already a Tensor)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def as_array(x: TensorLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class LayerParams:
    """Parameters and hyper-parameters of one network layer.

    Convolution weights are shaped (C_out, C_in, kH, kW) with a (C_out,)
    bias. The same container carries the leaky-activation slope and the
    normalization epsilon so a layer is fully described by one object.
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    negative_slope: float = 0.01
    epsilon: float = 1e-5

    def __post_init__(self):
        w, b = self.weights.data, self.bias.data
        if w.ndim != 4:
            raise ContractViolation(f"conv weights must be 4-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ContractViolation(
                f"bias shape {b.shape} does not match C_out={w.shape[0]}"
            )
        if self.stride < 1:
            raise ContractViolation(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ContractViolation(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.data.shape[1]

    @property
    def kernel_size(self) -> tuple:
        return self.weights.data.shape[2:]
