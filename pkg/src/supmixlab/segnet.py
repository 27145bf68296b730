"""Tiny encoder-decoder segmentation model, patch discriminator and checkpoints.

Checkpoint layout (all integers little-endian uint32, values little-endian float64)::

    b"SMXC" | version | tensor count
    per tensor: name length | utf-8 name | rank | extents[rank] | values (row-major)
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .numerics import Tensor, ops, parameter
from .numerics.ops import ShapeError

CHECKPOINT_MAGIC = b"SMXC"
CHECKPOINT_VERSION = 1

# fixed input standardisation applied inside the model
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def he_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class _Module:
    params: "OrderedDict[str, Tensor]"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def _conv(self, name, x, stride=1, act=True, leaky=False):
        k = self.params[name + ".weight"]
        b = self.params[name + ".bias"]
        y = ops.conv2d(x, k, b, stride=stride, padding=k.shape[-1] // 2)
        if not act:
            return y
        return ops.leaky_relu(y) if leaky else ops.relu(y)


# (name, in-width multiplier, out-width multiplier, stride); widths scale with base width w
_ENCODER = [
    ("enc1.conv", None, 1, 1),
    ("enc1.down", 1, 1, 2),
    ("enc2.conv", 1, 2, 1),
    ("enc2.down", 2, 2, 2),
    ("enc3.conv", 2, 4, 1),
    ("enc3.down", 4, 4, 2),
]
_DECODER = [
    ("dec3.conv", 4 + 4, 2),
    ("dec2.conv", 2 + 2, 1),
    ("dec1.conv", 1 + 1, 1),
]


class SegModel(_Module):
    """Encoder (3 stride-2 blocks) + skip-connected bilinear decoder + 1x1 head.

    ``forward`` returns ``(logits, features)`` where features are the decoder
    output right before the class head.
    """

    def __init__(self, num_classes: int, width: int = 16, in_channels: int = 3, seed: int = 0, dtype=np.float64):
        self.num_classes = num_classes
        self.width = width
        self.in_channels = in_channels
        rng = np.random.default_rng(seed)
        w = width
        self.params = OrderedDict()
        for name, cin, cout, _ in _ENCODER:
            cin_ch = in_channels if cin is None else cin * w
            self._add(name, cout * w, cin_ch, 3, rng, dtype)
        for name, cin, cout in _DECODER:
            self._add(name, cout * w, cin * w, 3, rng, dtype)
        self._add("head", num_classes, w, 1, rng, dtype)

    @property
    def feature_channels(self) -> int:
        return self.width

    def _add(self, name, cout, cin, k, rng, dtype):
        self.params[name + ".weight"] = parameter(he_init((cout, cin, k, k), rng, dtype))
        self.params[name + ".bias"] = parameter(np.zeros(cout, dtype=dtype))

    def forward(
        self,
        image: Tensor,
        feature_dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by 8")
        if image.shape[-3] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {image.shape[-3]}")
        image = ops.add(ops.mul(image, 1.0 / INPUT_STD), -INPUT_MEAN / INPUT_STD)
        s1 = self._conv("enc1.conv", image)
        x = self._conv("enc1.down", s1, stride=2)
        s2 = self._conv("enc2.conv", x)
        x = self._conv("enc2.down", s2, stride=2)
        s3 = self._conv("enc3.conv", x)
        x = self._conv("enc3.down", s3, stride=2)

        if feature_dropout > 0.0:
            x, s1, s2, s3 = (ops.channel_dropout(t, feature_dropout, True, rng) for t in (x, s1, s2, s3))

        cat_axis = image.ndim - 3
        for name, skip in (("dec3.conv", s3), ("dec2.conv", s2), ("dec1.conv", s1)):
            x = ops.upsample_bilinear(x, skip.shape[-2:])
            x = self._conv(name, ops.concat([x, skip], axis=cat_axis))
        features = x
        logits = self._conv("head", features, act=False)
        return logits, features

    __call__ = forward

    def predict(self, image: Tensor) -> np.ndarray:
        """Argmax class map, no graph kept."""
        logits, _ = self.forward(Tensor(image.data))
        return logits.data.argmax(axis=-3).astype(np.uint8)


class PatchDiscriminator(_Module):
    """Three stride-2 convs + sigmoid: feature map -> per-location probability of 'labeled'."""

    def __init__(
        self,
        in_channels: int,
        width: int = 16,
        seed: int = 0,
        zero_head: bool = True,
        per_image: bool = False,
        dtype=np.float64,
    ):
        self.in_channels = in_channels
        self.per_image = per_image
        rng = np.random.default_rng(seed)
        self.params = OrderedDict()
        shapes = [("disc1", width, in_channels), ("disc2", width, width), ("disc3", 1, width)]
        for name, cout, cin in shapes:
            wgt = he_init((cout, cin, 3, 3), rng, dtype)
            if name == "disc3" and zero_head:
                wgt = np.zeros_like(wgt)
            self.params[name + ".weight"] = parameter(wgt)
            self.params[name + ".bias"] = parameter(np.zeros(cout, dtype=dtype))

    @staticmethod
    def output_extent(h: int, w: int) -> tuple[int, int]:
        for _ in range(3):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-3] != self.in_channels:
            raise ShapeError(
                f"discriminator expects {self.in_channels} channels, got {features.shape[-3]}"
            )
        x = self._conv("disc1", features, stride=2, leaky=True)
        x = self._conv("disc2", x, stride=2, leaky=True)
        x = self._conv("disc3", x, stride=2, act=False)
        if self.per_image:
            x = ops.spatial_mean(x)
        return ops.sigmoid(x)

    __call__ = forward


def save_checkpoint(path: str | os.PathLike, tensors: "OrderedDict[str, np.ndarray]") -> None:
    """Write named arrays atomically (temp file + rename)."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more bytes)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return out


def model_from_state(state, dtype=np.float64) -> SegModel:
    """Rebuild a SegModel whose width and class count match a saved state."""
    if "enc1.conv.weight" not in state or "head.weight" not in state:
        raise CheckpointError("state holds no segmentation-model tensors")
    width, in_ch = state["enc1.conv.weight"].shape[:2]
    num_classes = state["head.weight"].shape[0]
    model = SegModel(num_classes, width=width, in_channels=in_ch, dtype=dtype)
    model.load_state_dict({k: v for k, v in state.items() if k in model.params})
    return model
