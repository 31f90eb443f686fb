"""Supervised training loop: poly-scheduled momentum SGD over both branches."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import batch as stack_batch
from .data import flip_pair
from .errors import ContractError, IoError, TrainingError
from .evaluation import ConfusionMatrix, miou
from .networks import NetworkSpec, ParameterStore, forward, init_params, predict
from .ops import cross_entropy
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HPSN"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "iter", "lr", "loss", "miou")


@dataclass
class TrainConfig:
    base_lr: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    batch_size: int = 8
    epochs: int = 15
    seed: int = 0
    flip_augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("base_lr", "momentum", "weight_decay", "poly_power"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if np.dtype(self.dtype).kind != "f":
            raise ContractError(f"dtype must be a float type, got {self.dtype}")


def poly_lr(it, max_iter, cfg: TrainConfig) -> float:
    if max_iter <= 0 or not 0 <= it <= max_iter:
        raise ContractError(f"poly_lr needs 0 <= iter <= max_iter, max_iter > 0; got {it}, {max_iter}")
    return cfg.base_lr * (1.0 - it / max_iter) ** cfg.poly_power


def _decays(name):
    # conv weights only; biases are exempt
    return name.endswith(".w")


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore, grads: dict, lr: float):
        for name in grads:
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in layer {name}")
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for name, t in params.items():
            g = grads.get(name)
            if g is None:
                continue
            step = g + wd * t.data if _decays(name) and wd else g
            v = self.velocity.get(name)
            v = step if v is None else mu * v + step
            self.velocity[name] = v
            t.data = (t.data - lr * v).astype(t.dtype, copy=False)
        return params


def sgd_step(params: ParameterStore, grads: dict, lr: float, cfg: TrainConfig, optimizer: Optional[SGD] = None):
    """One update in place; pass the same ``optimizer`` across calls to keep momentum."""
    opt = optimizer or SGD(cfg)
    opt.step(params, grads, lr)
    return params, opt


# ---------------------------------------------------------------- gradients


def _shard_loss(images, labels, spec, params, dtype):
    with Tape(dtype) as tape:
        logits = forward(Tensor(images), spec, params)
        loss = cross_entropy(logits, labels, reduction="sum")
        grads = tape.backward(loss)
        out = {}
        for name, t in params.items():
            nid = tape.node_id(t)
            if nid is not None and nid in grads:
                out[name] = grads[nid]
    return float(loss.item()), out


def thread_count():
    raw = os.environ.get("HPS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"HPS_THREADS must be an integer, got {raw!r}") from None


def loss_and_grads(images, labels, spec, params, dtype=np.float64, threads=None):
    """Mean cross entropy over non-ignored pixels and its parameter gradients.

    With several threads the batch is split into contiguous shards whose summed
    losses and gradients are reduced in shard order, so results do not depend on
    scheduling.
    """
    threads = threads or thread_count()
    n = images.shape[0]
    shards = min(threads, n)
    bounds = np.linspace(0, n, shards + 1).astype(int)
    parts = [(images[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    if shards == 1:
        results = [_shard_loss(*parts[0], spec, params, dtype)]
    else:
        with ThreadPoolExecutor(shards) as pool:
            results = list(pool.map(lambda p: _shard_loss(*p, spec, params, dtype), parts))
    count = int((labels != 255).sum())
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for loss, g in results:
        total += loss
        for name, arr in g.items():
            grads[name] = arr if name not in grads else grads[name] + arr
    if count == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in grads.items()}
    return total / count, {k: v / count for k, v in grads.items()}


# ------------------------------------------------------------------- loops


def evaluate(samples, spec: NetworkSpec, params: ParameterStore, batch_size=16):
    """Inference over ``samples``; returns (mIoU, per-class IoU, confusion matrix)."""
    cm = ConfusionMatrix(spec.num_classes)
    dtype = params.dtype
    for i in range(0, len(samples), batch_size):
        images, labels = stack_batch(samples[i : i + batch_size], dtype)
        pred = predict(forward(Tensor(images), spec, params))
        cm.accumulate(pred, labels)
    mean, iou = miou(cm)
    return mean, iou, cm


def train(
    dataset,
    spec: NetworkSpec,
    cfg: TrainConfig,
    eval_set=None,
    checkpoint_path=None,
    metrics_path=None,
    params: Optional[ParameterStore] = None,
):
    """Train ``spec`` on ``dataset``; returns (params, metrics rows).

    One metrics row per epoch: mean batch loss, the last learning rate used and
    the mIoU on ``eval_set`` (NaN when no eval set is given).
    """
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    dtype = np.dtype(cfg.dtype)
    params = (params or init_params(spec, cfg.seed)).astype(dtype)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    max_iter = max(cfg.epochs * per_epoch, 1)
    opt = SGD(cfg)
    rows = []
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        lr = cfg.base_lr
        for b in range(per_epoch):
            chosen = [dataset[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            images, labels = stack_batch(chosen, dtype)
            if cfg.flip_augment:
                flips = rng.random((len(chosen), 2)) < 0.5
                for k, (fh, fv) in enumerate(flips):
                    images[k], labels[k] = flip_pair(images[k], labels[k], fh, fv)
            loss, grads = loss_and_grads(images, labels, spec, params, dtype)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at iteration {it}")
            lr = poly_lr(it, max_iter, cfg)
            opt.step(params, grads, lr)
            losses.append(loss)
            it += 1
        score = evaluate(eval_set, spec, params)[0] if eval_set else math.nan
        row = {"epoch": epoch, "iter": it, "lr": lr, "loss": float(np.mean(losses)), "miou": score}
        log.info("epoch %d iter %d lr %.6f loss %.5f miou %.4f", epoch, it, lr, row["loss"], score)
        rows.append(row)
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return params, rows


# ------------------------------------------------------------- serialisation


def format_metrics(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        m = "" if math.isnan(r["miou"]) else f"{r['miou']:.6f}"
        w.writerow([r["epoch"], r["iter"], f"{r['lr']:.8f}", f"{r['loss']:.8f}", m])
    return buf.getvalue()


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(format_metrics(rows))


def encode_checkpoint(params: ParameterStore) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, t in params.items():
        raw = name.encode()
        arr = np.asarray(t.data, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, path=None, dtype=np.float64) -> ParameterStore:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise IoError("not an HPSN checkpoint", 0, path)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise IoError("truncated checkpoint", pos, path)
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise IoError(f"unsupported checkpoint version {version}", 4, path)
    tensors = {}
    while pos < len(buf):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise IoError("truncated parameter name", pos, path)
        name = buf[pos : pos + n].decode()
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape))
        if pos + 8 * count > len(buf):
            raise IoError(f"truncated values for {name}", pos, path)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ParameterStore(tensors)


def save_checkpoint(path, params: ParameterStore):
    data = encode_checkpoint(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float64) -> ParameterStore:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path, dtype)
