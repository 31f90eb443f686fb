"""Reachable-loss experiments on micro networks with two alternative paths.

A :class:`TinyInstance` holds a handful of small samples and a single
path-selection layer ``out = W0 * (A x) + W1 * (B x)`` with ``W1 = 2 - W0``
(the two-path normalisation with a symmetric range).  ``A`` is a fixed
projection that discards one input direction, so the main-branch feature
``F = A x`` cannot see it; ``B`` is trained.  The objective is the pixel MSE
plus ``ridge * |B|^2``.

* The oracle treats every per-pixel ``W0`` as a free variable in ``[alpha, beta]``.
  For fixed masks the objective is (ridge) least squares in ``B``, so the inner
  minimum is exact and only the mask box is searched (grid, then a bounded
  quasi-Newton polish).
* The constrained families generate ``W`` with a micro HP-module, from ``F``
  only (gated) or from ``F`` plus hidden variables (hidden).  Hidden variables
  are either a free per-pixel map (unrestricted) or a 1x1 mini-branch on the
  input.  All parameters are trained by multi-restart SGD.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, ContractError
from .hp_module import HpParams, make_mask
from .networks import ParameterStore
from .ops import ConvParams, add, conv2d, expand, mean_all, mul, scale, sub, sum_all
from .tensor import Tape, Tensor
from .training import SGD, TrainConfig, poly_lr

MAX_GRID_POINTS = 2_000_000
PROBE_RADII = (0.25, 0.1, 0.05)
HIDDEN_MODES = ("free", "linear")


@dataclass
class TinyInstance:
    name: str
    x: np.ndarray  # (S, c_in, h, w)
    y: np.ndarray  # (S, c_out, h, w)
    a: np.ndarray  # (c_out, c_in) fixed weights of path 0
    # the wider stage-entry range: at 0.75 / 1.25 the shared mask bias drives
    # every free mask onto the lower bound, where clip passes no gradient
    alpha: float = 0.5
    beta: float = 1.5
    ridge: float = 0.0
    resolution: int = 5
    reduce_channels: int = 1
    hidden_mode: str = "free"
    hidden_channels: int = 1
    restarts: int = 20
    steps: int = 2000
    lr: float = 0.05
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.x.ndim != 4 or self.y.ndim != 4 or self.x.shape[0] != self.y.shape[0]:
            raise ContractError("x and y must be (S, c, h, w) with matching S")
        if self.x.shape[2:] != self.y.shape[2:]:
            raise ContractError("x and y must share spatial size")
        if self.a.shape != (self.c_out, self.c_in):
            raise ContractError(f"fixed path weights must be {(self.c_out, self.c_in)}, got {self.a.shape}")
        if self.x.shape[0] > 8 or self.x.shape[2] > 4 or self.x.shape[3] > 4:
            raise ContractError("tiny instances hold at most 8 samples of at most 4x4 pixels")
        if self.mask_dof > 8:
            raise ContractError(f"{self.mask_dof} mask degrees of freedom; at most 8 are searchable")
        if self.hidden_mode not in HIDDEN_MODES:
            raise ConfigError(f"hidden_mode must be one of {HIDDEN_MODES}")
        if self.param_count("hidden") > 64:
            raise ContractError(f"micro network has {self.param_count('hidden')} parameters, limit 64")
        if not self.alpha < self.beta or abs(self.alpha + self.beta - 2.0) > 1e-12:
            raise ContractError("two-path instances need alpha < beta with alpha + beta = 2")

    @property
    def mask_dof(self):
        s, _, h, w = self.x.shape
        return s * h * w

    @property
    def c_in(self):
        return self.x.shape[1]

    @property
    def c_out(self):
        return self.y.shape[1]

    def pixels(self):
        """(k, c_in) inputs and (k, c_out) targets in (sample, row, col) order."""
        xs = self.x.transpose(0, 2, 3, 1).reshape(-1, self.c_in)
        ys = self.y.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        return xs, ys

    def param_count(self, family):
        """Trainable scalars: B, the reduce and mask convolutions, and the hidden source."""
        r, m = self.reduce_channels, self.hidden_channels
        count = self.c_out * self.c_in + (r * self.c_out + r) + 2 * r + 2
        if family == "hidden":
            count += 2 * m
            count += m * self.mask_dof if self.hidden_mode == "free" else m * self.c_in + m
        return count


# ------------------------------------------------------------------ the oracle


def reduced_loss(inst: TinyInstance, w, with_grad=False):
    """Objective minimised over ``B`` in closed form, for a batch of masks ``w`` (M, k).

    Returns losses (M,) and, if requested, their gradients (M, k).
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    xs, ys = inst.pixels()
    k, c = xs.shape
    n = k * inst.c_out
    pa = xs @ inst.a.T  # (k, c_out), the fixed path
    v = 2.0 - w
    resid_target = ys[None] - w[..., None] * pa[None]  # (M, k, c_out)
    gram = np.einsum("mk,ka,kb->mab", v * v, xs, xs) + n * inst.ridge * np.eye(c)
    rhs = np.einsum("mk,ka,mkj->maj", v, xs, resid_target)  # (M, c, c_out)
    b = np.linalg.solve(gram, rhs)
    loss = (np.einsum("mkj,mkj->m", resid_target, resid_target) - np.einsum("maj,maj->m", rhs, b)) / n
    if not with_grad:
        return loss
    pb = np.einsum("ka,maj->mkj", xs, b)
    resid = w[..., None] * pa[None] + v[..., None] * pb - ys[None]
    grad = 2.0 / n * np.sum(resid * (pa[None] - pb), axis=2)
    return loss, grad


def grid_search(fn: Callable, k, lo, hi, resolution, chunk=65536):
    """Exhaustive search of a batched objective over the grid ``linspace(lo, hi, resolution)^k``.

    Returns (best value, best point, all values in grid order).
    """
    if resolution < 2:
        raise ConfigError("grid resolution must be at least 2")
    total = resolution**k
    if total > MAX_GRID_POINTS:
        raise ConfigError(f"grid of {resolution}^{k} = {total} points exceeds {MAX_GRID_POINTS}")
    axis = np.linspace(lo, hi, resolution)
    place = resolution ** np.arange(k - 1, -1, -1)
    values = np.empty(total)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        values[idx] = fn(axis[(idx[:, None] // place) % resolution])
    best = int(np.argmin(values))
    return float(values[best]), axis[(best // place) % resolution], values


@dataclass
class OracleResult:
    loss: float
    w: np.ndarray
    grid_loss: float
    grid_w: np.ndarray


def oracle_best_loss(inst: TinyInstance, resolution=None, polish=True, polish_starts=8) -> OracleResult:
    """Best objective over free per-pixel masks: grid search, then a bounded polish
    from the best grid cells.  The polish never returns worse than the grid."""
    res = resolution or inst.resolution
    if res < 5:
        raise ConfigError(f"oracle grid resolution must be >= 5, got {res}")
    k = inst.mask_dof
    grid_loss, grid_w, values = grid_search(lambda w: reduced_loss(inst, w), k, inst.alpha, inst.beta, res)
    best_loss, best_w = grid_loss, grid_w
    if polish:
        axis = np.linspace(inst.alpha, inst.beta, res)
        place = res ** np.arange(k - 1, -1, -1)

        def objective(w):
            loss, grad = reduced_loss(inst, w, with_grad=True)
            return loss[0], grad[0]

        for flat in np.argsort(values)[:polish_starts]:
            out = minimize(
                objective,
                axis[(flat // place) % res],
                jac=True,
                method="L-BFGS-B",
                bounds=[(inst.alpha, inst.beta)] * k,
                options={"maxiter": 1000, "ftol": 1e-16, "gtol": 1e-13},
            )
            if out.fun < best_loss:
                best_loss, best_w = float(out.fun), np.asarray(out.x)
    return OracleResult(best_loss, best_w, grid_loss, grid_w)


# ------------------------------------------------------- constrained families


def _init_store(inst: TinyInstance, family, restart):
    rng = np.random.default_rng([inst.seed, restart, 0 if family == "gated" else 1])
    r, m = inst.reduce_channels, inst.hidden_channels
    s, _, h, w = inst.x.shape
    shapes = {
        "B.w": (inst.c_out, inst.c_in, 1, 1),
        "reduce.w": (r, inst.c_out, 1, 1),
        "reduce.b": (1, r, 1, 1),
        "mask.w": (2, r + (m if family == "hidden" else 0), 1, 1),
        "mask.b": (1, 2, 1, 1),
    }
    if family == "hidden":
        if inst.hidden_mode == "free":
            shapes["hidden"] = (s, m, h, w)
        else:
            shapes["mini.w"] = (m, inst.c_in, 1, 1)
            shapes["mini.b"] = (1, m, 1, 1)
    # small generator weights start every mask near 1, inside the clip range,
    # where it still receives gradient
    tensors = {
        n: Tensor(rng.normal(0.0, 0.5 if n == "B.w" else inst.init_scale, sh), requires_grad=True)
        for n, sh in shapes.items()
    }
    return ParameterStore(tensors, seed=restart)


def micro_forward(inst: TinyInstance, params: ParameterStore, family):
    """Masked prediction and the generated mask."""
    x = Tensor(inst.x)
    zero = Tensor(np.zeros((1, inst.c_out, 1, 1)))
    f = conv2d(x, ConvParams(Tensor(inst.a[:, :, None, None]), zero))
    p1 = conv2d(x, ConvParams(params["B.w"], zero))
    hp = HpParams(params.conv("reduce"), params.conv("mask"), inst.alpha, inst.beta, cut_gradients=False)
    hidden = None
    if family == "hidden":
        hidden = params["hidden"] if inst.hidden_mode == "free" else conv2d(x, params.conv("mini"))
    mask = make_mask(f, hidden, hp)
    out = add(mul(f, expand(mask.channel(0), f.shape)), mul(p1, expand(mask.channel(1), f.shape)))
    return out, mask


def micro_loss(inst: TinyInstance, params: ParameterStore, family):
    out, _ = micro_forward(inst, params, family)
    err = sub(out, Tensor(inst.y))
    loss = mean_all(mul(err, err))
    if inst.ridge:
        b = params["B.w"]
        loss = add(loss, scale(sum_all(mul(b, b)), inst.ridge))
    return loss


def constrained_run(inst: TinyInstance, family, restart):
    """One seeded momentum-SGD run; returns (best loss seen, final parameters)."""
    params = _init_store(inst, family, restart)
    cfg = TrainConfig(base_lr=inst.lr, momentum=0.9, weight_decay=0.0, dtype="float64")
    opt = SGD(cfg)
    best = math.inf
    for it in range(inst.steps + 1):
        with Tape(np.float64) as tape:
            loss = micro_loss(inst, params, family)
            value = loss.item()
            if not math.isfinite(value):
                break
            best = min(best, value)
            if it == inst.steps:
                break
            grads = tape.backward(loss)
            g = {n: tape.grad(grads, t) for n, t in params.items()}
        opt.step(params, g, poly_lr(it, inst.steps, cfg))
    return best, params


def constrained_best_loss(inst: TinyInstance, constraint) -> float:
    """Best loss over ``inst.restarts`` seeded SGD restarts of the gated or hidden family."""
    if constraint not in ("gated", "hidden"):
        raise ConfigError(f"constraint must be 'gated' or 'hidden', got {constraint!r}")
    return min(constrained_run(inst, constraint, r)[0] for r in range(inst.restarts))


# ------------------------------------------------------------- convexity probe


@dataclass
class ProbeReport:
    radius: float
    residual: float  # |fit residual| / |L(W) - L(W*)|
    min_eigenvalue: float
    linear_norm: float
    quadratic_norm: float
    rank_deficient: bool
    hessian: np.ndarray = field(repr=False)
    gradient: np.ndarray = field(repr=False)

    @property
    def gradient_ratio(self):
        return self.linear_norm / self.quadratic_norm if self.quadratic_norm > 0 else math.inf


def convexity_probe(loss_fn: Callable, w_star, radius, samples=None, seed=0) -> ProbeReport:
    """Least-squares fit of ``L(W* + d) - L(W*) = g.d + d'Hd / 2`` over points ``d``
    drawn uniformly from the ball of the given radius, in antithetic pairs.

    ``loss_fn`` maps a batch (M, k) to losses (M,).
    """
    w_star = np.asarray(w_star, dtype=np.float64)
    k = w_star.size
    pairs = list(itertools.combinations_with_replacement(range(k), 2))
    n_feat = k + len(pairs)
    half = max(samples or 0, 3 * n_feat) // 2 + 1
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(half, k))
    d *= (radius * rng.random(half) ** (1.0 / k) / np.linalg.norm(d, axis=1))[:, None]
    d = np.concatenate([d, -d])
    base = float(np.asarray(loss_fn(w_star[None]))[0])
    target = np.asarray(loss_fn(w_star[None] + d)) - base
    quad = np.stack([d[:, i] * d[:, j] * (0.5 if i == j else 1.0) for i, j in pairs], axis=1)
    design = np.concatenate([d, quad], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    g = coef[:k]
    h = np.zeros((k, k))
    for (i, j), c in zip(pairs, coef[k:]):
        h[i, j] = h[j, i] = c
    denom = np.linalg.norm(target)
    return ProbeReport(
        radius=radius,
        residual=float(np.linalg.norm(resid) / denom) if denom > 0 else 0.0,
        min_eigenvalue=float(np.linalg.eigvalsh(h).min()),
        linear_norm=float(np.linalg.norm(g)),
        quadratic_norm=float(np.linalg.norm(h)),
        rank_deficient=bool(rank < n_feat),
        hessian=h,
        gradient=g,
    )


# ------------------------------------------------------------------ instances


def teacher_instance(name, seed, noise=0.01, max_dev=0.2, nonlinear=False, c_in=3, c_out=6, **kw) -> TinyInstance:
    """Targets from a two-path teacher whose mask follows the input direction
    that the fixed path discards.

    With ``nonlinear`` the teacher mask depends on that direction through a
    sine, which no logistic-of-linear generator represents exactly.  The mask
    gain is set so teacher masks stay within ``1 +- max_dev``, inside the
    default range.
    """
    rng = np.random.default_rng([seed, 7])
    x = rng.normal(size=(2, c_in, 2, 2))
    d = rng.normal(size=c_in)
    d /= np.linalg.norm(d)
    basis = np.linalg.qr(np.column_stack([d, rng.normal(size=(c_in, c_in - 1))]))[0][:, 1:]
    a = rng.normal(size=(c_out, c_in - 1)) @ basis.T  # rank c_in - 1, blind to d
    b = rng.normal(size=(c_out, c_in))
    proj = np.einsum("c,schw->shw", d, x)
    z = np.sin(2.0 * proj) if nonlinear else proj
    gain = np.log((1.0 + max_dev) / (1.0 - max_dev)) / np.abs(z).max()
    w0 = 2.0 / (1.0 + np.exp(-gain * z))
    pa = np.einsum("oc,schw->sohw", a, x)
    pb = np.einsum("oc,schw->sohw", b, x)
    y = w0[:, None] * pa + (2.0 - w0[:, None]) * pb + noise * rng.normal(size=pa.shape)
    return TinyInstance(name, x, y, a, seed=seed, **kw)


def shipped_instances(**overrides) -> list:
    return [
        teacher_instance("linear_mask", 0, **overrides),
        teacher_instance("sine_mask", 1, nonlinear=True, **overrides),
        teacher_instance("linear_mask_minibranch", 2, hidden_mode="linear", hidden_channels=2, **overrides),
    ]


# ---------------------------------------------------------------------- report


@dataclass
class ManifoldRow:
    instance: str
    oracle: float
    gated: float
    hidden: float
    probes: list

    def as_csv(self):
        return [self.instance, f"{self.oracle:.10g}", f"{self.gated:.10g}", f"{self.hidden:.10g}"] + [
            f"{p.residual:.6g}" for p in self.probes
        ]


def run_instance(inst: TinyInstance, radii=PROBE_RADII) -> ManifoldRow:
    oracle = oracle_best_loss(inst)
    gated = constrained_best_loss(inst, "gated")
    hidden = constrained_best_loss(inst, "hidden")
    probes = [convexity_probe(lambda w: reduced_loss(inst, w), oracle.w, r, seed=inst.seed) for r in radii]
    return ManifoldRow(inst.name, oracle.loss, gated, hidden, probes)


def write_report(path, rows, radii=PROBE_RADII):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "oracle_loss", "gated_loss", "hidden_loss"] + [f"quad_residual_r{r:g}" for r in radii])
        for row in rows:
            w.writerow(row.as_csv())
