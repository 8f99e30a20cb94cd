"""The three-layer CNN: config, He-initialized parameters, forward pass,
and a bit-exact little-endian binary checkpoint format.

Pipeline: conv(3x3, stride 1, pad k//2) -> relu -> 2x2 maxpool, twice, then
flatten -> dense to the class logits. No softmax inside forward; the loss
layer and inference each apply their own.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    DimensionError,
)

CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1

# fixed record order in the checkpoint file
PARAM_NAMES = ("conv1_weight", "conv1_bias", "conv2_weight", "conv2_bias",
               "dense_weight", "dense_bias")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Structural hyperparameters of the network (defaults: 256/256/14)."""

    input_size: int = 64
    input_channels: int = 3
    conv1_filters: int = 256
    conv2_filters: int = 256
    kernel: int = 3
    pool: int = 2
    num_classes: int = 14

    def validate(self) -> None:
        if self.pool != 2:
            raise ConfigurationError(f"pool is fixed at 2, got {self.pool}")
        if self.input_size < 4 or self.input_size % (self.pool ** 2) != 0:
            raise ConfigurationError(
                f"input_size must be a positive multiple of {self.pool ** 2} "
                f"(two pooling stages), got {self.input_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv1_filters < 1 or self.conv2_filters < 1:
            raise ConfigurationError("filter counts must be >= 1")
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(
                f"kernel must be odd so padding k//2 preserves size, got {self.kernel}")

    @property
    def feature_size(self) -> int:
        """Flattened feature count after the two conv/pool stages."""
        side = self.input_size // (self.pool ** 2)
        return self.conv2_filters * side * side


@dataclass
class ModelParams:
    """Weights and biases of the three-layer CNN plus the config that shaped them."""

    config: ArchitectureConfig
    conv1_weight: Tensor
    conv1_bias: Tensor
    conv2_weight: Tensor
    conv2_bias: Tensor
    dense_weight: Tensor
    dense_bias: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def validate(self) -> None:
        cfg = self.config
        cfg.validate()
        k = cfg.kernel
        expected = _expected_shapes(cfg)
        for name, t in self.tensors():
            if t.shape != expected[name]:
                raise CheckpointShapeError(
                    f"{name} has shape {t.shape}, config implies {expected[name]}")
            if not np.all(np.isfinite(t.data)):
                raise ConfigurationError(f"{name} contains non-finite values")

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, *(getattr(self, n).astype(dtype) for n in PARAM_NAMES))


def _expected_shapes(cfg: ArchitectureConfig) -> dict[str, tuple]:
    k = cfg.kernel
    return {
        "conv1_weight": (cfg.conv1_filters, cfg.input_channels, k, k),
        "conv1_bias": (cfg.conv1_filters,),
        "conv2_weight": (cfg.conv2_filters, cfg.conv1_filters, k, k),
        "conv2_bias": (cfg.conv2_filters,),
        "dense_weight": (cfg.feature_size, cfg.num_classes),
        "dense_bias": (cfg.num_classes,),
    }


def build_model(config: ArchitectureConfig, seed: int) -> ModelParams:
    """He-initialized parameters, deterministic for a given seed.

    Weights are zero-mean normal with std sqrt(2 / fan_in); biases zero.
    Draw order is fixed: conv1_weight, conv2_weight, dense_weight.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    k = config.kernel

    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32))

    conv1_w = he((config.conv1_filters, config.input_channels, k, k),
                 config.input_channels * k * k)
    conv2_w = he((config.conv2_filters, config.conv1_filters, k, k),
                 config.conv1_filters * k * k)
    dense_w = he((config.feature_size, config.num_classes), config.feature_size)
    zeros = lambda n: Tensor(np.zeros(n, dtype=np.float32))
    return ModelParams(config, conv1_w, zeros(config.conv1_filters),
                       conv2_w, zeros(config.conv2_filters),
                       dense_w, zeros(config.num_classes))


def forward(params: ModelParams, batch: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Run the network on an N,C,S,S batch and return raw N,K logits."""
    cfg = params.config
    s = cfg.input_size
    if batch.data.ndim != 4 or batch.shape[1] != cfg.input_channels \
            or batch.shape[2] != s or batch.shape[3] != s:
        raise DimensionError(
            f"batch must be N,{cfg.input_channels},{s},{s}, got {batch.shape}")
    pad = cfg.kernel // 2
    h = ag.conv2d(batch, params.conv1_weight, params.conv1_bias,
                  stride=1, padding=pad, tape=tape)
    h = ag.relu(h, tape=tape)
    h = ag.maxpool2(h, tape=tape)
    h = ag.conv2d(h, params.conv2_weight, params.conv2_bias,
                  stride=1, padding=pad, tape=tape)
    h = ag.relu(h, tape=tape)
    h = ag.maxpool2(h, tape=tape)
    h = ag.flatten(h, tape=tape)
    return ag.dense(h, params.dense_weight, params.dense_bias, tape=tape)


# -- checkpoint I/O ----------------------------------------------------------
#
# Layout (all integers little-endian uint32, floats little-endian float32):
#   magic "MTCK" | version | 7 config fields (input_size, input_channels,
#   conv1_filters, conv2_filters, kernel, pool, num_classes) | 6 tensor
#   records in PARAM_NAMES order, each: name_len, name bytes, rank, dims,
#   payload.

_U32 = struct.Struct("<I")


def save_checkpoint(params: ModelParams, path) -> None:
    params.validate()
    cfg = params.config
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += _U32.pack(CHECKPOINT_VERSION)
    for v in (cfg.input_size, cfg.input_channels, cfg.conv1_filters,
              cfg.conv2_filters, cfg.kernel, cfg.pool, cfg.num_classes):
        buf += _U32.pack(v)
    for name, t in params.tensors():
        nb = name.encode("ascii")
        buf += _U32.pack(len(nb))
        buf += nb
        buf += _U32.pack(t.data.ndim)
        for d in t.shape:
            buf += _U32.pack(d)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointTruncatedError(
                f"checkpoint ends inside {what} (need {n} bytes at offset {pos})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def take_u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = take_u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported version {version}")

    fields = [take_u32("config") for _ in range(7)]
    cfg = ArchitectureConfig(*fields)
    try:
        cfg.validate()
    except ConfigurationError as e:
        raise CheckpointShapeError(f"embedded config invalid: {e}") from e

    expected = _expected_shapes(cfg)
    tensors = {}
    for want_name in PARAM_NAMES:
        name_len = take_u32("record name length")
        name = take(name_len, "record name").decode("ascii", errors="replace")
        if name != want_name:
            raise CheckpointShapeError(f"expected record {want_name!r}, found {name!r}")
        rank = take_u32("record rank")
        dims = tuple(take_u32("record dims") for _ in range(rank))
        if dims != expected[name]:
            raise CheckpointShapeError(
                f"{name} has dims {dims}, config implies {expected[name]}")
        count = int(np.prod(dims))
        payload = take(4 * count, f"{name} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        tensors[name] = Tensor(arr.astype(np.float32, copy=True))
    if pos != len(raw):
        raise CheckpointShapeError(f"{len(raw) - pos} trailing bytes after last record")

    params = ModelParams(cfg, *(tensors[n] for n in PARAM_NAMES))
    params.validate()
    return params
