"""Soft-mask generation and pixel-wise path selection.

A mask has one channel per alternative path.  Channel ``i`` is broadcast over
the feature channels of path ``i`` and the weighted paths are summed.  When
``cut_gradients`` is set, the feature input of the mask generator is detached
so the only gradient reaching the main-branch features is ``upstream * mask``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ContractError, ShapeError
from .ops import (
    ConvParams,
    add,
    clip,
    concat_channels,
    conv2d,
    expand,
    mul,
    scale,
    slice_channels,
    softmax_channels,
)
from .tensor import Tensor, detach

DEFAULT_RANGE = (0.75, 1.25)
STAGE_ENTRY_RANGE = (0.5, 1.5)


@dataclass
class SoftMask:
    values: Tensor
    alpha: float
    beta: float

    @property
    def paths(self):
        return self.values.shape[1]

    def channel(self, i):
        return slice_channels(self.values, i, i + 1)


@dataclass
class HpParams:
    reduce_conv: ConvParams
    mask_conv: ConvParams
    alpha: float = DEFAULT_RANGE[0]
    beta: float = DEFAULT_RANGE[1]
    cut_gradients: bool = True

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise ContractError(f"HpParams needs alpha < beta, got ({self.alpha}, {self.beta})")

    @property
    def paths(self):
        return self.mask_conv.out_channels


def expected_deviation(alpha, beta):
    """Mean distance of a mask value from the optimum when both lie in [alpha, beta]."""
    return (beta - alpha) / 2


def normalize_mask(logits: Tensor, alpha: float, beta: float) -> Tensor:
    """clip(2 * softmax(logits), alpha, beta); the factor 2 centres equal logits at 1."""
    if not alpha < beta:
        raise ContractError(f"normalize_mask needs alpha < beta, got ({alpha}, {beta})")
    if logits.shape[1] < 2:
        raise ContractError(f"mask logits need >= 2 path channels, got {logits.shape[1]}")
    return clip(scale(softmax_channels(logits), 2.0), alpha, beta)


def make_mask(f: Tensor, h: Optional[Tensor], p: HpParams) -> SoftMask:
    """Mask from main-branch features ``f`` and hidden variables ``h``.

    ``h=None`` builds the feature-only (gated) mask.  ``h`` is never detached.
    """
    if h is not None and (h.shape[0], h.shape[2], h.shape[3]) != (f.shape[0], f.shape[2], f.shape[3]):
        raise ShapeError("make_mask", f.shape, h.shape, detail="features and hidden must share (n, h, w)")
    src = detach(f) if p.cut_gradients else f
    z = conv2d(src, p.reduce_conv)
    if h is not None:
        z = concat_channels(z, h)
    logits = conv2d(z, p.mask_conv)
    return SoftMask(normalize_mask(logits, p.alpha, p.beta), p.alpha, p.beta)


def select_paths(paths: Sequence[Tensor], mask: SoftMask) -> Tensor:
    """Sum of ``paths[i] * mask[:, i]`` with the mask slice broadcast over channels."""
    if len(paths) != mask.paths:
        raise ShapeError(
            "select_paths", (len(paths),), (mask.paths,), detail="path count vs mask channels"
        )
    ref = paths[0].shape
    for pth in paths[1:]:
        if pth.shape != ref:
            raise ShapeError("select_paths", ref, pth.shape)
    m = mask.values
    if (m.shape[0], m.shape[2], m.shape[3]) != (ref[0], ref[2], ref[3]):
        raise ShapeError("select_paths", ref, m.shape, detail="mask spatial dims")
    out = None
    for i, pth in enumerate(paths):
        term = mul(pth, expand(mask.channel(i), ref))
        out = term if out is None else add(out, term)
    return out
