"""Confusion matrices, mIoU, analytic FLOPs accounting and mask rendering."""

from __future__ import annotations

import csv
import math
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError
from .ops import IGNORE_LABEL, conv_output_size


class ConfusionMatrix:
    """``q[i, j]`` counts pixels of true class ``i`` predicted as ``j``."""

    def __init__(self, num_classes, q=None):
        self.num_classes = int(num_classes)
        if q is None:
            q = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.q = np.asarray(q, dtype=np.int64)

    def accumulate(self, pred, label, ignore_value=IGNORE_LABEL):
        pred = np.asarray(pred)
        label = np.asarray(label)
        if pred.shape != label.shape:
            raise ShapeError("accumulate", pred.shape, label.shape)
        keep = label != ignore_value
        t = label[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        n = self.num_classes
        for name, arr in (("label", t), ("prediction", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise DataError(f"{name} class id outside 0..{n - 1}")
        self.q += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ShapeError("merge", self.q.shape, other.q.shape)
        return ConfusionMatrix(self.num_classes, self.q + other.q)

    __add__ = merge

    @property
    def total(self):
        return int(self.q.sum())


def accumulate(cm: ConfusionMatrix, pred, label, ignore_value=IGNORE_LABEL) -> ConfusionMatrix:
    return cm.accumulate(pred, label, ignore_value)


def miou(cm: ConfusionMatrix):
    """Mean IoU and the per-class IoU vector.

    A class whose union is empty is absent: NaN in the vector, excluded from
    the mean.  Returns NaN for the mean if every class is absent.
    """
    q = cm.q.astype(np.float64)
    inter = np.diag(q)
    union = q.sum(axis=1) + q.sum(axis=0) - inter
    iou = np.full(cm.num_classes, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    mean = float(iou[present].mean()) if present.any() else math.nan
    return mean, iou


def write_iou_csv(path, iou, class_names=None, mean=None):
    """One header row of class names (plus mIoU) and one row of values."""
    names = list(class_names) if class_names else [f"class_{i}" for i in range(len(iou))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["mIoU"])
        vals = ["" if math.isnan(v) else f"{v:.6f}" for v in iou]
        w.writerow(vals + ["" if mean is None or math.isnan(mean) else f"{mean:.6f}"])


# ----------------------------------------------------------------------- flops


def conv_flops(out_ch, in_ch, kh, kw, out_h, out_w):
    # one multiply-accumulate = 2 FLOPs, bias ignored
    return 2 * out_ch * in_ch * kh * kw * out_h * out_w


def _half(h):
    return (h - 1) // 2 + 1


def _trunk_flops(spec, height, width, mini):
    """FLOPs of one branch without head or masks, plus per-layer output sizes."""
    stem_ch = spec.mini_channels if mini else spec.stem_channels
    total = conv_flops(stem_ch, spec.in_channels, 3, 3, height, width)
    total += stem_ch * height * width  # relu
    bounds = [(spec.in_channels, height, width), (stem_ch, height, width)]
    h, w = height, width
    sizes = {}
    for layer in spec.layers(mini=mini):
        oh = conv_output_size(h, 3, layer.stride, 1)
        ow = conv_output_size(w, 3, layer.stride, 1)
        c_in, c = layer.in_channels, layer.out_channels
        n_out = c * oh * ow
        total += conv_flops(c, c_in, 3, 3, oh, ow) + n_out  # conv1 + relu
        total += conv_flops(c, c, 3, 3, oh, ow)
        if layer.stride == 2:
            total += c_in * h * w  # avgpool reads every input element once
        if c_in != c:
            total += conv_flops(c, c_in, 1, 1, oh, ow)
        if layer.entry:
            ec, eh, ew = bounds[-2]
            while eh >= 2 * oh and ew >= 2 * ow:
                total += ec * eh * ew
                eh, ew = eh // 2, ew // 2
            if ec != c:
                total += conv_flops(c, ec, 1, 1, oh, ow)
        total += (layer.paths - 1) * n_out  # path summation
        sizes[layer.index] = (oh, ow)
        if layer.final:
            bounds.append((c, oh, ow))
        h, w = oh, ow
    return total, sizes


def count_flops(spec, height=64, width=64) -> dict:
    """Analytic per-sample FLOPs of ``spec`` at the given input size.

    Keys: ``main`` (backbone without head), ``mini``, ``hp_modules`` (mask
    generation and application), ``hidden`` (mini-branch plus the hidden-input
    part of the mask convolutions), ``head``, ``total``, ``overhead`` (total minus
    the baseline variant's total) and ``overhead_ratio`` (overhead over the
    baseline backbone, head excluded).
    """
    main, sizes = _trunk_flops(spec, height, width, mini=False)
    head = conv_flops(spec.num_classes, spec.stages[-1].channels, 3, 3, *sizes[spec.num_layers - 1])
    variant = spec.variant
    uses_mini = variant in ("hps", "hps_ps", "hps_ig")
    mini = _trunk_flops(spec, height, width, mini=True)[0] if uses_mini else 0
    hp = 0
    hidden_in_mask = 0
    if variant != "baseline":
        r = spec.reduce_channels
        m = spec.mini_channels if variant != "gated" else 0
        for layer in spec.layers():
            if layer.index not in spec.selected_layers:
                continue
            oh, ow = sizes[layer.index]
            k = layer.paths
            hp += conv_flops(r, layer.out_channels, 3, 3, oh, ow)
            hp += conv_flops(k, r + m, 3, 3, oh, ow)
            hp += 3 * k * oh * ow  # softmax, x2, clip
            if variant == "hps_ps":
                hp += k * oh * ow  # spatial mean
            hp += k * layer.out_channels * oh * ow  # mask products
            if variant in ("hps", "hps_ps", "hps_ig"):
                hidden_in_mask += conv_flops(k, m, 3, 3, oh, ow)
    total = main + mini + hp + head
    overhead = mini + hp
    return {
        "main": main,
        "mini": mini,
        "hp_modules": hp,
        "hidden": mini + hidden_in_mask,
        "head": head,
        "total": total,
        "overhead": overhead,
        "overhead_ratio": overhead / main,
    }


# ----------------------------------------------------------------------- masks


def mask_to_gray(mask_channel, alpha, beta) -> np.ndarray:
    """Linearly map values in [alpha, beta] to uint8 [0, 255]."""
    v = (np.asarray(mask_channel, dtype=np.float64) - alpha) / (beta - alpha)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def render_masks(masks: dict, sample: int = 0) -> dict:
    """Grayscale render of channel 0 of each mask: ``{layer: (h, w) uint8}``."""
    out = {}
    for layer, m in sorted(masks.items()):
        vals = m.values.data if hasattr(m.values, "data") else np.asarray(m.values)
        out[layer] = mask_to_gray(vals[sample, 0], m.alpha, m.beta)
    return out


def flops_table(spec, height=64, width=64, variants=None) -> list:
    """Rows of count_flops for each variant of ``spec``."""
    from .networks import VARIANTS

    rows = []
    for v in variants or VARIANTS:
        row = {"variant": v}
        row.update(count_flops(spec.with_variant(v), height, width))
        rows.append(row)
    return rows


def tape_flops(tape, start: int = 0, stop: Optional[int] = None) -> int:
    """FLOPs of recorded nodes, using the same per-op conventions as count_flops."""
    total = 0
    nodes = tape.nodes[start:stop]
    for node in nodes:
        kind = node.op_kind
        numel = int(np.prod(node.shape))
        if kind == "conv2d":
            w_shape = tape.nodes[node.parent_ids[1]].shape
            o, i, kh, kw = w_shape
            total += conv_flops(o, i, kh, kw, node.shape[2], node.shape[3])
        elif kind in ("relu", "add", "mul", "scale", "clip", "softmax"):
            total += numel
        elif kind in ("avgpool2", "spatial_mean"):
            total += int(np.prod(tape.nodes[node.parent_ids[0]].shape))
    return total
