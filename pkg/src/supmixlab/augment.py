"""Weak (geometric) and strong (photometric) augmentations.

Images are channel-first float arrays in [0, 1]; labels are ``H x W`` integer maps.
Photometric ops never see the label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import correlate1d

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Geometry:
    top: int
    left: int
    size: int
    flip: bool


@dataclass(frozen=True)
class StrongParams:
    p_jitter: float = 0.8
    p_gray: float = 0.2
    p_blur: float = 0.5
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    sigma_range: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def disabled(cls) -> "StrongParams":
        return cls(p_jitter=0.0, p_gray=0.0, p_blur=0.0)


@dataclass
class AugmentedViews:
    weak: np.ndarray
    strong: np.ndarray
    label: np.ndarray
    geometry: Geometry


def pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad the trailing two axes up to ``size`` (no-op if already large enough)."""
    h, w = arr.shape[-2:]
    ph, pw = max(0, size - h), max(0, size - w)
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(arr, pad, mode=mode)


def sample_geometry(shape: tuple[int, int], crop_size: int, rng: np.random.Generator) -> Geometry:
    h, w = max(shape[0], crop_size), max(shape[1], crop_size)
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    flip = bool(rng.random() < 0.5)
    return Geometry(top, left, crop_size, flip)


def apply_geometry(arr: np.ndarray, geom: Geometry) -> np.ndarray:
    arr = pad_to(arr, geom.size)
    out = arr[..., geom.top : geom.top + geom.size, geom.left : geom.left + geom.size]
    if geom.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def weak_augment(image, label, crop_size: int, rng: np.random.Generator, return_geometry: bool = False):
    """Random crop + horizontal flip (p = 0.5), applied identically to image and label."""
    geom = sample_geometry(image.shape[-2:], crop_size, rng)
    out = (apply_geometry(image, geom), apply_geometry(label, geom))
    return (*out, geom) if return_geometry else out


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def grayscale(img: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA.astype(img.dtype), img, axes=(0, 0))
    return np.broadcast_to(gray, img.shape).copy()


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = grayscale(img)[0].mean()
    return np.clip((img - m) * factor + m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = grayscale(img)
    return np.clip(gray + (img - gray) * factor, 0.0, 1.0)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.moveaxis(img, 0, -1))
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0).astype(img.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(2 * sigma))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=-1, mode="reflect")
    out = correlate1d(out, k, axis=-2, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def strong_augment(image: np.ndarray, rng: np.random.Generator, params: StrongParams = StrongParams()) -> np.ndarray:
    """Colour jitter -> grayscale -> Gaussian blur, each gated by its probability.

    Every random number is drawn whether or not its op fires, so the stream
    consumed per call is fixed.
    """
    u_jit, u_gray, u_blur = rng.random(3)
    b = rng.uniform(1 - params.brightness, 1 + params.brightness)
    c = rng.uniform(1 - params.contrast, 1 + params.contrast)
    s = rng.uniform(1 - params.saturation, 1 + params.saturation)
    hue = rng.uniform(-params.hue, params.hue)
    sigma = rng.uniform(*params.sigma_range)

    out = image
    if u_jit < params.p_jitter:
        out = adjust_brightness(out, b)
        out = adjust_contrast(out, c)
        out = adjust_saturation(out, s)
        out = adjust_hue(out, hue)
    if u_gray < params.p_gray:
        out = grayscale(out)
    if u_blur < params.p_blur:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def make_views(image, label, crop_size: int, rng: np.random.Generator, params: StrongParams = StrongParams()) -> AugmentedViews:
    weak, lbl, geom = weak_augment(image, label, crop_size, rng, return_geometry=True)
    return AugmentedViews(weak, strong_augment(weak, rng, params), lbl, geom)
