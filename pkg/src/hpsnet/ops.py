"""Neural primitives with forward and backward rules registered on the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .tensor import Tensor, forward_record, primitive

IGNORE_LABEL = 255


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise


@primitive("add")
def _add(a, b):
    return a + b, lambda g, needs: (g, g)


@primitive("sub")
def _sub(a, b):
    return a - b, lambda g, needs: (g, -g if needs[1] else None)


@primitive("mul")
def _mul(a, b):
    def vjp(g, needs):
        return (g * b if needs[0] else None, g * a if needs[1] else None)

    return a * b, vjp


@primitive("scale")
def _scale(x, k):
    return x * k, lambda g, needs: (g * k,)


@primitive("relu")
def _relu(x):
    pos = x > 0
    return np.where(pos, x, 0).astype(x.dtype, copy=False), lambda g, needs: (g * pos,)


@primitive("clip")
def _clip(x, lo, hi):
    interior = (x > lo) & (x < hi)
    # boundary subgradient is 0, no straight-through
    return np.clip(x, lo, hi), lambda g, needs: (g * interior,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return forward_record("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return forward_record("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; both operands must have identical shapes."""
    _same_shape("mul", a, b)
    return forward_record("mul", [a, b])


mul_elementwise = mul


def scale(x: Tensor, k: float) -> Tensor:
    return forward_record("scale", [x], k=float(k))


def relu(x: Tensor) -> Tensor:
    return forward_record("relu", [x])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ContractError(f"clip needs lo < hi, got lo={lo}, hi={hi}")
    return forward_record("clip", [x], lo=float(lo), hi=float(hi))


# ------------------------------------------------------------------ reductions


@primitive("sum_all")
def _sum_all(x):
    shape = x.shape
    return np.full((1, 1, 1, 1), x.sum(), dtype=x.dtype), lambda g, needs: (
        np.broadcast_to(g, shape).copy(),
    )


@primitive("mean_all")
def _mean_all(x):
    shape, n = x.shape, x.size
    return np.full((1, 1, 1, 1), x.mean(), dtype=x.dtype), lambda g, needs: (
        np.broadcast_to(g / n, shape).copy(),
    )


@primitive("spatial_mean")
def _spatial_mean(x):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3), keepdims=True), lambda g, needs: (
        np.broadcast_to(g / (h * w), x.shape).copy(),
    )


@primitive("expand")
def _expand(x, shape):
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    return np.broadcast_to(x, shape).copy(), lambda g, needs: (g.sum(axis=axes, keepdims=True),)


def sum_all(x: Tensor) -> Tensor:
    return forward_record("sum_all", [x])


def mean_all(x: Tensor) -> Tensor:
    return forward_record("mean_all", [x])


def spatial_mean(x: Tensor) -> Tensor:
    """Per-image, per-channel mean over (h, w), kept as (n, c, 1, 1)."""
    return forward_record("spatial_mean", [x])


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 dimensions of ``x`` up to ``shape``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError("expand", x.shape, shape)
    return forward_record("expand", [x], shape=shape)


# -------------------------------------------------------------------- channels


@primitive("concat")
def _concat(*xs):
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def vjp(g, needs):
        return tuple(
            g[:, bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(xs))
        )

    return np.concatenate(xs, axis=1), vjp


@primitive("slice")
def _slice(x, start, stop):
    shape = x.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return x[:, start:stop].copy(), vjp


@primitive("softmax")
def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return s, vjp


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) < 2:
        raise ContractError("concat_channels needs at least two tensors")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError("concat_channels", ref, x.shape, detail="(n, h, w) must agree")
    return forward_record("concat", list(xs))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("slice_channels", x.shape, detail=f"bad channel range [{start}, {stop})")
    return forward_record("slice", [x], start=int(start), stop=int(stop))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis."""
    if x.shape[1] < 2:
        raise ContractError(f"softmax_channels needs >= 2 channels, got {x.shape[1]}")
    return forward_record("softmax", [x])


# ------------------------------------------------------------------------ conv


@dataclass
class ConvParams:
    """Convolution parameters: weight (out, in, kh, kw) and bias (1, out, 1, 1)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: Optional[int] = None  # None -> kh // 2

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def pad(self):
        return self.weight.shape[2] // 2 if self.padding is None else self.padding


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    # xp is channels-last (n, h, w, c); columns are ordered (kh, kw, c)
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


@primitive("conv2d")
def _conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd, kw, stride, pad)
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + wd, :] = x.transpose(0, 2, 3, 1)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2) + b

    def vjp(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if needs[1]:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
        if needs[0]:
            dcols = (g2 @ wmat).reshape(n, oh, ow, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[
                        :, :, :, i, j, :
                    ]
            gx = gxp[:, pad : pad + h, pad : pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return out, vjp


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded cross-correlation."""
    if p.weight.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, p.weight.shape, detail="input channel mismatch")
    if p.bias.shape != (1, p.weight.shape[0], 1, 1):
        raise ShapeError("conv2d", p.weight.shape, p.bias.shape, detail="bias must be (1, out, 1, 1)")
    if p.stride < 1 or p.pad < 0:
        raise ContractError(f"conv2d: stride {p.stride} / padding {p.pad} out of range")
    kh, kw = p.kernel
    if conv_output_size(x.shape[2], kh, p.stride, p.pad) < 1 or conv_output_size(
        x.shape[3], kw, p.stride, p.pad
    ) < 1:
        raise ShapeError("conv2d", x.shape, p.weight.shape, detail="empty output")
    return forward_record("conv2d", [x, p.weight, p.bias], stride=int(p.stride), pad=int(p.pad))


# ------------------------------------------------------------------ resampling


def _nearest_index(src, dst):
    return (np.arange(dst) * src) // dst


@primitive("resize_nearest")
def _resize_nearest(x, oh, ow):
    n, c, h, w = x.shape
    ri = _nearest_index(h, oh)
    ci = _nearest_index(w, ow)
    out = x[:, :, ri][:, :, :, ci]

    def vjp(g, needs):
        if oh % h == 0 and ow % w == 0:
            fh, fw = oh // h, ow // w
            return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        return (gx,)

    return out, vjp


@primitive("avgpool2")
def _avgpool2(x):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    xc = x[:, :, : 2 * oh, : 2 * ow]
    out = xc.reshape(n, c, oh, 2, ow, 2).mean(axis=(3, 5))

    def vjp(g, needs):
        gx = np.zeros(x.shape, dtype=g.dtype)
        spread = np.broadcast_to((g / 4)[:, :, :, None, :, None], (n, c, oh, 2, ow, 2))
        gx[:, :, : 2 * oh, : 2 * ow] = spread.reshape(n, c, 2 * oh, 2 * ow)
        return (gx,)

    return out, vjp


def resize_nearest(x: Tensor, height: int, width: int) -> Tensor:
    if height < 1 or width < 1:
        raise ContractError(f"resize_nearest target must be >= 1, got {height}x{width}")
    if (height, width) == x.shape[2:]:
        return x
    return forward_record("resize_nearest", [x], oh=int(height), ow=int(width))


def avgpool_stride2(x: Tensor) -> Tensor:
    """Mean of non-overlapping 2x2 blocks; an odd trailing row/column is dropped."""
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("avgpool_stride2", x.shape, detail="spatial dims must be >= 2")
    return forward_record("avgpool2", [x])


def resize_to(x: Tensor, height: int, width: int) -> Tensor:
    """Parameter-free alignment: repeated 2x2 average pooling, then nearest."""
    while x.shape[2] >= 2 * height and x.shape[3] >= 2 * width:
        x = avgpool_stride2(x)
    return resize_nearest(x, height, width)


# ------------------------------------------------------------------------ loss


def _check_labels(labels, num_classes, ignore_value):
    bad = (labels != ignore_value) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        first = int(labels[bad].reshape(-1)[0])
        raise DataError(f"label {first} outside 0..{num_classes - 1} and not ignore ({ignore_value})")


@primitive("cross_entropy")
def _cross_entropy(logits, labels, ignore_value, reduction):
    n, c, h, w = logits.shape
    valid = labels != ignore_value
    safe = np.where(valid, labels, 0)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    se = e.sum(axis=1, keepdims=True)
    lse = (np.log(se) + m)[:, 0]
    picked = np.take_along_axis(logits, safe[:, None], axis=1)[:, 0]
    per_pixel = np.where(valid, lse - picked, 0.0)
    count = int(valid.sum())
    denom = max(count, 1) if reduction == "mean" else 1
    total = per_pixel.sum() / denom if count else 0.0

    def vjp(g, needs):
        if count == 0:
            return (np.zeros_like(logits),)
        p = e / se
        onehot = np.zeros_like(logits)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        coef = g.reshape(()) * valid[:, None] / denom
        return ((p - onehot) * coef,)

    return np.full((1, 1, 1, 1), total, dtype=logits.dtype), vjp


def cross_entropy(
    logits: Tensor, labels, ignore_value: int = IGNORE_LABEL, reduction: str = "mean"
) -> Tensor:
    """Pixel-wise cross entropy against an integer raster ``labels`` of shape (n, h, w).

    ``reduction="mean"`` averages over non-ignored pixels; ``"sum"`` returns the
    plain sum, for callers that normalise across shards themselves.
    """
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError("cross_entropy", logits.shape, labels.shape, detail="labels must be (n, h, w)")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    _check_labels(labels, c, ignore_value)
    return forward_record(
        "cross_entropy", [logits], labels=labels.astype(np.int64), ignore_value=ignore_value,
        reduction=reduction,
    )
