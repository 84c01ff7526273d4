"""Encoder-decoder segmentation network assembled from the numeric kernels.

The architecture is the classic U shape: per resolution level two
(conv3x3 -> instance norm -> leaky ReLU) blocks, 2x max-pooling between
encoder levels, nearest-neighbor upsampling plus skip concatenation on the
way back up, and a 1x1 conv head producing 3-class logits. Convolutions use
same-padding so logits match the input size exactly; nothing in here ever
looks at image metadata.

Checkpoints are a small binary format: magic "AXF1", a version byte, a
JSON header, then little-endian float32 weight blobs in build order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    ConfigError,
    ContractViolation,
    TruncatedCheckpointError,
)
from .tensor import LayerParams, Tensor

CHECKPOINT_MAGIC = b"AXF1"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_classes: int = 3
    negative_slope: float = 0.01
    max_channels: int = 256
    normalization: str = "instance"  # "instance" or "none"
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.out_classes != 3:
            raise ConfigError(
                f"out_classes must be 3 (background/axon/myelin), got {self.out_classes}"
            )
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.normalization not in ("instance", "none"):
            raise ConfigError(f"unknown normalization '{self.normalization}'")

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * (2**level), self.max_channels)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class Provenance:
    dataset_ids: List[str] = field(default_factory=list)
    fold_index: int = 0
    seed: int = 0
    train_sample_ids: List[str] = field(default_factory=list)


class Model:
    """A built network: ordered layer parameters plus forward/backward."""

    def __init__(self, config: UNetConfig, params: Dict[str, LayerParams]):
        self.config = config
        self.params = params  # insertion order == build order == blob order
        self._caches = None

    # -- construction -------------------------------------------------

    @staticmethod
    def layer_plan(config: UNetConfig) -> List[Tuple[str, int, int, int]]:
        """Conv layers in build order as (name, c_in, c_out, kernel)."""
        plan = []
        for l in range(config.depth):
            cin = config.in_channels if l == 0 else config.channels_at(l - 1)
            cout = config.channels_at(l)
            plan.append((f"enc{l}.conv1", cin, cout, 3))
            plan.append((f"enc{l}.conv2", cout, cout, 3))
        for l in range(config.depth - 2, -1, -1):
            cin = config.channels_at(l + 1) + config.channels_at(l)
            cout = config.channels_at(l)
            plan.append((f"dec{l}.conv1", cin, cout, 3))
            plan.append((f"dec{l}.conv2", cout, cout, 3))
        plan.append(("head", config.channels_at(0), config.out_classes, 1))
        return plan

    def named_params(self) -> List[Tuple[str, Tensor]]:
        out = []
        for name, lp in self.params.items():
            out.append((f"{name}.weights", lp.weights))
            out.append((f"{name}.bias", lp.bias))
        return out

    def zero_grads(self) -> None:
        for _, t in self.named_params():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params()}

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    def receptive_field_radius(self) -> int:
        """One-sided bound on the output receptive field, from the layer
        schedule. Pool/upsample misalignment makes the field asymmetric, so
        the radius is the ceiling half-width rather than (rf - 1) / 2."""
        rf, jump = 1, 1
        for l in range(self.config.depth):
            if l > 0:
                rf += jump  # 2x2 pooling window
                jump *= 2
            rf += 2 * 2 * jump  # two 3x3 convs
        for _ in range(self.config.depth - 1):
            jump = max(1, jump // 2)
            rf += 2 * 2 * jump
        return rf // 2

    # -- forward / backward --------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Run the network on a (N, in_channels, H, W) batch; returns logits.

        With train=True, intermediate activations are kept so a following
        backward() call can populate parameter gradients.
        """
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractViolation(
                f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}"
            )
        d = self.config.spatial_divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ContractViolation(
                f"input spatial dims {x.shape[2:]} must be divisible by {d}; "
                f"pad the patch before calling forward"
            )
        caches = {"pool_in": {}, "blocks": {}, "head_in": None} if train else None

        h = x
        skips = {}
        for l in range(self.config.depth):
            if l > 0:
                if train:
                    caches["pool_in"][l] = h
                h = kernels.maxpool2x(h).data
            h = self._block_forward(f"enc{l}.conv1", h, caches)
            h = self._block_forward(f"enc{l}.conv2", h, caches)
            if l < self.config.depth - 1:
                skips[l] = h
        for l in range(self.config.depth - 2, -1, -1):
            up = kernels.upsample2x(h).data
            h = np.concatenate([up, skips[l]], axis=1)
            h = self._block_forward(f"dec{l}.conv1", h, caches)
            h = self._block_forward(f"dec{l}.conv2", h, caches)
        if train:
            caches["head_in"] = h
        logits = kernels.conv2d(h, self.params["head"]).data
        self._caches = caches
        return logits

    def _block_forward(self, name: str, x: np.ndarray, caches) -> np.ndarray:
        lp = self.params[name]
        y1 = kernels.conv2d(x, lp).data
        if self.config.normalization == "instance":
            y2 = kernels.instance_norm(y1, lp.epsilon).data
        else:
            y2 = y1
        y3 = kernels.leaky_relu(y2, lp.negative_slope).data
        if caches is not None:
            caches["blocks"][name] = (x, y1, y2)
        return y3

    def _block_backward(self, name: str, gy: np.ndarray) -> np.ndarray:
        lp = self.params[name]
        x, y1, y2 = self._caches["blocks"][name]
        g = kernels.leaky_relu_backward(y2, gy, lp.negative_slope).data
        if self.config.normalization == "instance":
            g = kernels.instance_norm_backward(y1, g, lp.epsilon).data
        gx, gw, gb = kernels.conv2d_backward(x, lp, g)
        lp.weights.accumulate_grad(gw.data)
        lp.bias.accumulate_grad(gb.data)
        return gx.data

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Back-propagate from logits; accumulates parameter grads and
        returns the gradient with respect to the network input."""
        if self._caches is None:
            raise ContractViolation("backward() requires a prior forward(train=True)")
        cfg = self.config
        head = self.params["head"]
        gx, gw, gb = kernels.conv2d_backward(self._caches["head_in"], head, grad_logits)
        head.weights.accumulate_grad(gw.data)
        head.bias.accumulate_grad(gb.data)
        g = gx.data

        skip_grads = {}
        for l in range(0, cfg.depth - 1):  # reverse of decoder forward order
            g = self._block_backward(f"dec{l}.conv2", g)
            g = self._block_backward(f"dec{l}.conv1", g)
            c_up = cfg.channels_at(l + 1)
            skip_grads[l] = g[:, c_up:]
            g = kernels.upsample2x_backward(g[:, :c_up]).data
        for l in range(cfg.depth - 1, -1, -1):
            g = self._block_backward(f"enc{l}.conv2", g)
            g = self._block_backward(f"enc{l}.conv1", g)
            if l > 0:
                g = kernels.maxpool2x_backward(self._caches["pool_in"][l], g).data
                g = g + skip_grads[l - 1]
        self._caches = None
        return g

    # -- checkpoint bridge ---------------------------------------------

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.named_params():
            if name not in state:
                raise CheckpointError(f"state is missing parameter '{name}'")
            if state[name].shape != t.data.shape:
                raise CheckpointError(
                    f"parameter '{name}' shape {state[name].shape} != model {t.data.shape}"
                )
            t.data[...] = state[name].astype(t.data.dtype)


def build(config: UNetConfig, dtype=np.float32) -> Model:
    """Deterministically initialize a model from its config seed.

    He-style fan-in scaling with the leaky-slope correction; biases zero.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    a = config.negative_slope
    params: Dict[str, LayerParams] = {}
    for name, cin, cout, k in Model.layer_plan(config):
        fan_in = cin * k * k
        std = np.sqrt(2.0 / ((1.0 + a * a) * fan_in))
        w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        b = np.zeros(cout, dtype=dtype)
        params[name] = LayerParams(
            weights=Tensor(w),
            bias=Tensor(b),
            stride=1,
            padding=k // 2,  # same-padding
            negative_slope=a,
        )
    return Model(config, params)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    config: UNetConfig
    state: Dict[str, np.ndarray]  # float32 arrays, key order == blob order
    epoch: int = 0
    best_val_metric: float = 0.0
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        if not 0.0 <= self.best_val_metric <= 1.0:
            raise CheckpointError(
                f"best_val_metric must be in [0, 1], got {self.best_val_metric}"
            )

    def build_model(self) -> Model:
        model = build(self.config)
        model.load_state(self.state)
        return model


def checkpoint_from_model(
    model: Model, epoch: int, best_val_metric: float, provenance: Provenance
) -> ModelCheckpoint:
    state = {name: arr.astype(np.float32, copy=True) for name, arr in model.state_dict().items()}
    return ModelCheckpoint(
        config=model.config,
        state=state,
        epoch=epoch,
        best_val_metric=best_val_metric,
        provenance=provenance,
    )


def serialize(ckpt: ModelCheckpoint) -> bytes:
    arrays = [(name, list(arr.shape)) for name, arr in ckpt.state.items()]
    header = {
        "config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "best_val_metric": ckpt.best_val_metric,
        "provenance": asdict(ckpt.provenance),
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(bytes([CHECKPOINT_VERSION]))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for name, arr in ckpt.state.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize(blob: bytes) -> ModelCheckpoint:
    if len(blob) < len(CHECKPOINT_MAGIC):
        raise TruncatedCheckpointError(f"checkpoint has only {len(blob)} bytes")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 9:
        raise TruncatedCheckpointError("checkpoint truncated before header length")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if 9 + header_len > len(blob):
        raise TruncatedCheckpointError(
            f"header claims {header_len} bytes but only {len(blob) - 9} remain"
        )
    try:
        header = json.loads(blob[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    try:
        config = UNetConfig(**header["config"])
        provenance = Provenance(**header["provenance"])
        arrays = header["arrays"]
        epoch = int(header["epoch"])
        metric = float(header["best_val_metric"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint header missing fields: {e}") from e
    state: Dict[str, np.ndarray] = {}
    offset = 9 + header_len
    for name, shape in arrays:
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if offset + nbytes > len(blob):
            raise TruncatedCheckpointError(
                f"weight blob '{name}' truncated ({len(blob) - offset} of {nbytes} bytes)"
            )
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        state[name] = arr.copy()
        offset += nbytes
    return ModelCheckpoint(
        config=config, state=state, epoch=epoch, best_val_metric=metric, provenance=provenance
    )


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        return deserialize(f.read())
