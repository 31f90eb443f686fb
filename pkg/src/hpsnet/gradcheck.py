"""Finite-difference verification of the tape's vector-Jacobian products."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .hp_module import HpParams, make_mask, normalize_mask, select_paths
from .ops import ConvParams
from .tensor import Tape, Tensor

EPS = 1e-5
RTOL = 1e-4
MAX_SHAPE = (2, 4, 8, 8)


@dataclass
class GradCheckResult:
    name: str
    shapes: tuple
    max_rel_error: float
    passed: bool
    seconds: float


def _projected(fn, arrays, proj):
    out = fn([Tensor(a) for a in arrays])
    return float(np.sum(out.data * proj))


def analytic_grads(fn, arrays, proj):
    with Tape(np.float64) as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(leaves)
        loss = ops.sum_all(ops.mul(out, Tensor(proj)))
        grads = tape.backward(loss)
        return [tape.grad(grads, t) for t in leaves]


def numeric_grads(fn, arrays, proj, eps=EPS):
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = _projected(fn, arrays, proj)
            flat[i] = keep - eps
            down = _projected(fn, arrays, proj)
            flat[i] = keep
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(analytic, numeric):
    """Element-wise |a - n| / max(|a|, |n|), with a floor of 1e-6 of the gradient scale
    so entries that are zero in both do not divide by zero."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        if scale == 0.0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6 * scale)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def check_gradients(
    name, fn: Callable, arrays: Sequence[np.ndarray], seed=0, eps=EPS, rtol=RTOL
) -> GradCheckResult:
    """Compare tape gradients of ``sum(fn(inputs) * R)`` against central differences.

    ``R`` is a fixed random projection so every output element contributes.
    """
    t0 = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = fn([Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng([seed, 99]).normal(size=out_shape)
    a = analytic_grads(fn, arrays, proj)
    n = numeric_grads(fn, arrays, proj, eps)
    err = relative_error(a, n)
    return GradCheckResult(
        name, tuple(x.shape for x in arrays), err, err < rtol, time.perf_counter() - t0
    )


# ------------------------------------------------------------------- the suite


def _shape(rng, min_c=1, min_hw=1):
    n = int(rng.integers(1, MAX_SHAPE[0] + 1))
    c = int(rng.integers(min_c, MAX_SHAPE[1] + 1))
    h = int(rng.integers(min_hw, MAX_SHAPE[2] + 1))
    w = int(rng.integers(min_hw, MAX_SHAPE[3] + 1))
    return n, c, h, w


def _away_from(rng, shape, kinks, margin=1e-3, scale=1.0):
    """Normal samples with no element within ``margin`` of any kink."""
    x = rng.normal(0, scale, shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] += np.sign(x[close] - k + 1e-12) * 2 * margin
    return x


def _conv_fn(stride):
    return lambda t: ops.conv2d(t[0], ConvParams(t[1], t[2], stride))


def _cases(rng):
    """Yield (name, fn, arrays, kink_check) for one random draw of every case."""
    s = _shape(rng)
    yield "add", lambda t: ops.add(t[0], t[1]), [rng.normal(size=s), rng.normal(size=s)]
    yield "sub", lambda t: ops.sub(t[0], t[1]), [rng.normal(size=s), rng.normal(size=s)]
    yield "mul", lambda t: ops.mul(t[0], t[1]), [rng.normal(size=s), rng.normal(size=s)]
    yield "scale", lambda t: ops.scale(t[0], -1.7), [rng.normal(size=s)]
    yield "relu", lambda t: ops.relu(t[0]), [_away_from(rng, s, [0.0])]
    yield "clip", lambda t: ops.clip(t[0], -0.5, 0.7), [_away_from(rng, s, [-0.5, 0.7])]
    yield "sum_all", lambda t: ops.sum_all(t[0]), [rng.normal(size=s)]
    yield "mean_all", lambda t: ops.mean_all(t[0]), [rng.normal(size=s)]
    yield "spatial_mean", lambda t: ops.spatial_mean(t[0]), [rng.normal(size=s)]
    n, c, h, w = s
    yield "expand", lambda t: ops.expand(t[0], (n, c, h, w)), [rng.normal(size=(n, 1, 1, w))]
    s2 = (n, int(rng.integers(1, 4)), h, w)
    yield "concat", lambda t: ops.concat_channels(t[0], t[1]), [rng.normal(size=s), rng.normal(size=s2)]
    lo = int(rng.integers(0, c))
    yield "slice", lambda t: ops.slice_channels(t[0], lo, c), [rng.normal(size=s)]
    sc = _shape(rng, min_c=2)
    yield "softmax", lambda t: ops.softmax_channels(t[0]), [rng.normal(size=sc)]
    for k, stride in ((3, 1), (3, 2), (1, 1)):
        sx = _shape(rng, min_hw=2)
        o = int(rng.integers(1, 5))
        yield (
            f"conv2d_k{k}_s{stride}",
            _conv_fn(stride),
            [rng.normal(size=sx), rng.normal(size=(o, sx[1], k, k)), rng.normal(size=(1, o, 1, 1))],
        )
    sr = _shape(rng)
    yield "resize_nearest_up2", lambda t: ops.resize_nearest(t[0], 2 * sr[2], 2 * sr[3]), [rng.normal(size=sr)]
    yield "resize_nearest_any", lambda t: ops.resize_nearest(t[0], 5, 3), [rng.normal(size=sr)]
    sp = _shape(rng, min_hw=2)
    yield "avgpool2", lambda t: ops.avgpool_stride2(t[0]), [rng.normal(size=sp)]
    yield "resize_to", lambda t: ops.resize_to(t[0], 2, 3), [rng.normal(size=(1, 2, 8, 7))]
    se = _shape(rng, min_c=2)
    labels = rng.integers(0, se[1], size=(se[0], se[2], se[3]))
    labels[rng.random(labels.shape) < 0.2] = ops.IGNORE_LABEL
    yield "cross_entropy", lambda t: ops.cross_entropy(t[0], labels), [rng.normal(size=se)]
    # normalisation with logits spread so some values clip and some do not
    sm = _shape(rng, min_c=2)
    yield "normalize_mask", lambda t: normalize_mask(t[0], 0.75, 1.25), [_mask_logits(rng, sm, 0.75, 1.25)]
    yield from _hp_cases(rng)


def _mask_logits(rng, shape, alpha, beta, margin=1e-3):
    """Logits whose normalised value 2*softmax stays ``margin`` away from both clip bounds."""
    while True:
        x = rng.normal(0, 0.6, shape)
        e = np.exp(x - x.max(axis=1, keepdims=True))
        v = 2 * e / e.sum(axis=1, keepdims=True)
        if np.min(np.abs(v - alpha)) > margin and np.min(np.abs(v - beta)) > margin:
            return x


def _hp_cases(rng):
    """Composed mask generation and path selection, with the gradient cut disabled
    so every input's full derivative is visible to the finite differences."""
    for paths in (2, 3):
        n, c, h, w = _shape(rng, min_c=2, min_hw=2)
        r, m = 2, 2
        alpha, beta = (0.75, 1.25) if paths == 2 else (0.5, 1.5)

        def fn(t, paths=paths, alpha=alpha, beta=beta):
            p = HpParams(
                ConvParams(t[1], t[2]), ConvParams(t[3], t[4]), alpha, beta, cut_gradients=False
            )
            f = t[0]
            mask = make_mask(f, t[5], p)
            branch = [f] + list(t[6 : 6 + paths - 1])
            return select_paths(branch, mask)

        for attempt in range(50):
            arrays = [
                rng.normal(size=(n, c, h, w)),
                rng.normal(0, 0.5, size=(r, c, 3, 3)),
                rng.normal(0, 0.1, size=(1, r, 1, 1)),
                rng.normal(0, 0.3, size=(paths, r + m, 3, 3)),
                rng.normal(0, 0.1, size=(1, paths, 1, 1)),
                rng.normal(size=(n, m, h, w)),
            ] + [rng.normal(size=(n, c, h, w)) for _ in range(paths - 1)]
            if _hp_margin(arrays, alpha, beta) > 1e-3:
                break
        yield f"hp_module_{paths}paths", fn, arrays


def _hp_margin(arrays, alpha, beta):
    f, wr, br, wm, bm, hid = (Tensor(a) for a in arrays[:6])
    z = ops.concat_channels(ops.conv2d(f, ConvParams(wr, br)), hid)
    logits = ops.conv2d(z, ConvParams(wm, bm)).data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    v = 2 * e / e.sum(axis=1, keepdims=True)
    return min(np.min(np.abs(v - alpha)), np.min(np.abs(v - beta)))


def run_suite(seed=0, trials=2, only: Optional[Sequence[str]] = None) -> list:
    """Check every differentiable primitive and the composed HP-module on
    ``trials`` independent random draws of shapes up to (2, 4, 8, 8)."""
    results = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, fn, arrays in _cases(rng):
            if only and name not in only:
                continue
            results.append(check_gradients(name, fn, arrays, seed=trial))
    return results


def format_table(results) -> str:
    lines = [f"{'case':<22} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.max_rel_error:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
