"""Differentiable layer ops on channel-first tensors.

Spatial ops accept either ``C x H x W`` or ``N x C x H x W`` input; a 3-D input
is treated as a batch of one and the result keeps the input's rank.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    pass


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data + s, (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding via an im2col matmul."""
    xb, squeeze = _batched(x)
    n, cin, h, w = xb.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    p, s = padding, stride
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    hp, wp = h + 2 * p, w + 2 * p
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    # windows: n, cin, ho, wo, kh, kw -> cols: n, cin*kh*kw, ho*wo
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, ho * wo)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    result = out[0] if squeeze else out

    def backward(g: np.ndarray):
        gb = (g[None] if squeeze else g).reshape(n, cout, ho * wo)
        gk = gx = gbias = None
        if kernel.requires_grad:
            gk = np.einsum("nop,nkp->ok", gb, cols, optimize=True).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gb).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=xb.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            if squeeze:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gbias)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(result, parents, backward, "conv2d")


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False convention)
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the two trailing axes; linear in x, so backward is the transpose."""
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h, size[0], x.dtype)
    mw = _bilinear_matrix(w, size[1], x.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), backward, "upsample")


def concat(xs: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(data, xs, backward, "concat")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def channel_dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Drops whole feature channels (per sample), rescaling survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mshape = x.shape[:-2] + (1, 1)
    keep = (rng.random(mshape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "channel_dropout")


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def spatial_mean(x: Tensor) -> Tensor:
    """Average over the two trailing axes, keeping them as size-1 extents."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "spatial_mean")
