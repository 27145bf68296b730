"""Class-aware and rectangular image/label mixing: ClassMix, SupMix and CutMix.

Every mix pastes ``src`` where the binary mask is 1 and keeps ``dst`` elsewhere::

    out = mask * src + (1 - mask) * dst        (images and labels alike)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import IGNORE_INDEX, Tensor


class MixShapeError(ValueError):
    pass


@dataclass
class MixResult:
    image: np.ndarray
    label: np.ndarray
    mask: np.ndarray
    selected: frozenset = field(default_factory=frozenset)
    box: tuple[int, int, int, int] | None = None


def present_classes(label: np.ndarray, ignore_index: int = IGNORE_INDEX) -> set[int]:
    vals = np.unique(label)
    return {int(v) for v in vals if v != ignore_index}


def select_classmix_classes(present, rng: np.random.Generator) -> set[int]:
    """Uniform subset of half the present classes, rounded down."""
    pool = sorted(present)
    k = len(pool) // 2
    if k == 0:
        return set()
    return {pool[i] for i in rng.choice(len(pool), size=k, replace=False)}


def select_supmix_classes(present, background: int, rng: np.random.Generator) -> set[int]:
    """Background removed, then max(1, n // 2) of the rest; empty if nothing remains."""
    pool = sorted(c for c in present if c != background)
    if not pool:
        return set()
    k = max(1, len(pool) // 2)
    return {pool[i] for i in rng.choice(len(pool), size=k, replace=False)}


def build_mask(label: np.ndarray, selected, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """1 where the label's class is selected; ignore pixels are never members."""
    sel = [c for c in selected if c != ignore_index]
    return np.isin(label, sel).astype(np.uint8)


def compose(src_img, src_lbl, dst_img, dst_lbl, mask) -> MixResult:
    mask = np.asarray(mask)
    hw = mask.shape
    for name, arr in (("src_img", src_img), ("dst_img", dst_img), ("src_lbl", src_lbl), ("dst_lbl", dst_lbl)):
        if arr.shape[-2:] != hw:
            raise MixShapeError(f"{name} spatial shape {arr.shape[-2:]} != mask shape {hw}")
    if src_img.shape != dst_img.shape:
        raise MixShapeError(f"image shapes differ: {src_img.shape} vs {dst_img.shape}")
    m = mask.astype(bool)
    image = np.where(m, src_img, dst_img)
    label = np.where(m, src_lbl, dst_lbl).astype(np.result_type(src_lbl, dst_lbl))
    return MixResult(image, label, mask.astype(np.uint8))


def argmax_labels(model, image: np.ndarray) -> np.ndarray:
    logits, _ = model(Tensor(image))
    return logits.data.argmax(axis=-3).astype(np.uint8)


def classmix(x_a: np.ndarray, x_b: np.ndarray, model, rng: np.random.Generator) -> MixResult:
    """Paste half of the classes predicted on ``x_a`` onto ``x_b`` (inference-mode model)."""
    y_a = argmax_labels(model, x_a)
    y_b = argmax_labels(model, x_b)
    return classmix_from_labels(x_a, y_a, x_b, y_b, rng)


def classmix_from_labels(x_a, y_a, x_b, y_b, rng, mask_source=None) -> MixResult:
    """ClassMix given precomputed labels; ``mask_source`` overrides ``y_a`` for class selection."""
    src = y_a if mask_source is None else mask_source
    selected = select_classmix_classes(present_classes(src), rng)
    res = compose(x_a, y_a, x_b, y_b, build_mask(src, selected))
    res.selected = frozenset(selected)
    return res


def supmix(
    x_l: np.ndarray,
    y_l: np.ndarray,
    x_strong: np.ndarray,
    y_pseudo: np.ndarray,
    background: int,
    rng: np.random.Generator,
) -> MixResult:
    """Paste ground-truth class regions of a labeled image onto an unlabeled view.

    The mask comes from ``y_l`` only, so pasted pixels always carry the true
    class; outside the mask the pseudo-label (ignore pixels included) is kept.
    """
    if IGNORE_INDEX in y_l:
        raise ValueError("ground-truth label for supmix must not contain ignore_index")
    selected = select_supmix_classes(present_classes(y_l), background, rng)
    res = compose(x_l, y_l, x_strong, y_pseudo, build_mask(y_l, selected))
    res.selected = frozenset(selected)
    return res


def sample_box(shape: tuple[int, int], rng: np.random.Generator, area_range=(0.1, 0.5)) -> tuple[int, int, int, int]:
    """Rectangle (top, left, bottom, right) with uniform area ratio and centre, clipped to bounds."""
    h, w = shape
    ratio = rng.uniform(*area_range)
    cut_h = int(round(h * np.sqrt(ratio)))
    cut_w = int(round(w * np.sqrt(ratio)))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = int(np.clip(cy - cut_h // 2, 0, h))
    bottom = int(np.clip(cy + cut_h - cut_h // 2, 0, h))
    left = int(np.clip(cx - cut_w // 2, 0, w))
    right = int(np.clip(cx + cut_w - cut_w // 2, 0, w))
    return top, left, bottom, right


def box_mask(shape: tuple[int, int], box) -> np.ndarray:
    top, left, bottom, right = box
    m = np.zeros(shape, dtype=np.uint8)
    m[top:bottom, left:right] = 1
    return m


def cutmix(x_a, y_a, x_b, y_b, rng: np.random.Generator, area_range=(0.1, 0.5)) -> MixResult:
    """Paste a random rectangle of (x_a, y_a) onto (x_b, y_b)."""
    if x_a.shape != x_b.shape or y_a.shape != y_b.shape:
        raise MixShapeError("cutmix inputs must share shapes")
    box = sample_box(y_a.shape, rng, area_range)
    res = compose(x_a, y_a, x_b, y_b, box_mask(y_a.shape, box))
    res.box = box
    return res
