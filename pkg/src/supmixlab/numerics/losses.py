"""Segmentation and adversarial losses. Both reduce by the mean."""

from __future__ import annotations

import numpy as np

from .ops import ShapeError
from .tensor import Tensor, make_result

IGNORE_INDEX = 255
BCE_EPS = 1e-7


def log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_ce(logits: Tensor, target, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean per-pixel cross entropy over non-ignored pixels.

    ``logits`` is ``C x H x W`` or ``N x C x H x W``; ``target`` is the matching
    integer map without the channel axis. Returns 0 (with zero gradient) when
    every pixel is ignored.
    """
    target = np.asarray(target)
    batched = logits.ndim == 4
    lg = logits.data if batched else logits.data[None]
    tg = target if batched else target[None]
    n, c, h, w = lg.shape
    if tg.shape != (n, h, w):
        raise ShapeError(f"softmax_ce: target shape {target.shape} does not match logits {logits.shape}")
    valid = tg != ignore_index
    if np.any(tg[valid] < 0) or np.any(tg[valid] >= c):
        raise ValueError(f"softmax_ce: target class outside [0, {c}) at a non-ignored pixel")
    count = int(valid.sum())
    if count == 0:
        return make_result(
            np.asarray(0.0, dtype=logits.dtype),
            (logits,),
            lambda g: (np.zeros_like(logits.data),),
            "softmax_ce",
        )

    logp = log_softmax(lg, axis=1)
    safe_t = np.where(valid, tg, 0)
    picked = np.take_along_axis(logp, safe_t[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe_t[:, None], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None] * (g / count)
        return (grad if batched else grad[0],)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")


def bce(prediction: Tensor, target: float) -> Tensor:
    """Binary cross entropy of probabilities against a constant 0/1 target."""
    if target not in (0, 1):
        raise ValueError(f"bce target must be 0 or 1, got {target}")
    p = prediction.data
    clipped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    n = p.size
    if target == 1:
        loss = -np.log(clipped).mean()
    else:
        loss = -np.log1p(-clipped).mean()

    def backward(g):
        if target == 1:
            d = -1.0 / clipped
        else:
            d = 1.0 / (1.0 - clipped)
        return (d * inside * (g / n),)

    return make_result(np.asarray(loss, dtype=prediction.dtype), (prediction,), backward, "bce")
