"""Command-line entry point: ``hpsnet <subcommand> ...``.

Exit codes: 0 success, 1 contract/config/data violations, 2 I/O errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, keys_help
from .errors import HpsError, IoError
from .evaluation import flops_table, render_masks, write_iou_csv
from .networks import forward
from .tensor import Tensor

log = logging.getLogger("hpsnet")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise HpsError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_datasets(cfg: RunConfig):
    """(train, test) samples: manifests when given, otherwise synthetic, cropped to patches."""
    from .data import crop_patches, gen_synthetic, read_manifest

    def build(manifest_key, count_key, seed):
        if cfg[manifest_key]:
            samples = read_manifest(cfg[manifest_key])
        else:
            samples = gen_synthetic(
                cfg[count_key], cfg["data.classes"], cfg["data.size"], seed, cfg["data.ignore_fraction"]
            )
        return [p for s in samples for p in crop_patches(s, cfg["data.patch"])]

    train = build("data.train_manifest", "data.train_count", cfg["data.seed"])
    test = build("data.test_manifest", "data.test_count", cfg["data.seed"] + 1)
    return train, test


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    out = _out_dir(cfg)
    train_set, test_set = load_datasets(cfg)
    _, rows = train(
        train_set,
        cfg.network_spec(),
        cfg.train_config(),
        eval_set=test_set,
        checkpoint_path=out / "checkpoint.hpsn",
        metrics_path=out / "metrics.csv",
    )
    (out / "config.txt").write_text(cfg.dump())
    last = rows[-1] if rows else None
    if last:
        print(f"epochs {last['epoch']}  loss {last['loss']:.5f}  test mIoU {last['miou']:.4f}")
    print(f"wrote {out / 'checkpoint.hpsn'} and {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .data import read_manifest
    from .training import evaluate, load_checkpoint

    cfg = _config(args)
    spec = cfg.network_spec()
    params = load_checkpoint(args.checkpoint, np.dtype(cfg["train.dtype"]))
    if args.manifest:
        samples = read_manifest(args.manifest)
    else:
        samples = load_datasets(cfg)[1]
    mean, iou, _ = evaluate(samples, spec, params)
    out = Path(args.out) if args.out else _out_dir(cfg) / "iou.csv"
    write_iou_csv(out, iou, mean=mean)
    for c, v in enumerate(iou):
        print(f"class {c}: IoU {'absent' if math.isnan(v) else f'{v:.4f}'}")
    print(f"mIoU {mean:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(seed=args.seed, trials=args.trials)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_inspect_masks(args) -> int:
    from .data import read_raster, write_pnm
    from .training import load_checkpoint

    cfg = _config(args)
    spec = cfg.network_spec()
    params = load_checkpoint(args.checkpoint, np.dtype(cfg["train.dtype"]))
    if args.image:
        label_path = args.labels or args.image
        sample = read_raster(args.image, label_path) if args.labels else None
        if sample is None:
            from .data import read_pnm

            rgb = read_pnm(args.image)
            if rgb.ndim != 3:
                raise IoError("image raster must be P6", 0, args.image)
            image = rgb.transpose(2, 0, 1)[None] / 255.0
        else:
            image = sample.image
    else:
        samples = load_datasets(cfg)[1]
        if not 0 <= args.sample < len(samples):
            raise HpsError(f"sample index {args.sample} outside 0..{len(samples) - 1}")
        image = samples[args.sample].image
    masks = {}
    forward(Tensor(image.astype(params.dtype)), spec, params, masks=masks)
    if not masks:
        raise HpsError(f"variant {spec.variant} generates no masks")
    out = Path(args.out) if args.out else _out_dir(cfg) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    layers = {l.index: l for l in spec.layers()}
    for d, gray in render_masks(masks).items():
        path = out / f"mask_stage{layers[d].stage + 1}_layer{d}.pgm"
        write_pnm(path, gray)
        print(path)
    return 0


def cmd_manifold(args) -> int:
    from .manifold import run_instance, shipped_instances, write_report

    cfg = _config(args)
    overrides = {k: cfg[f"manifold.{k}"] for k in ("resolution", "restarts", "steps", "lr")}
    rows = []
    for inst in shipped_instances(**overrides):
        row = run_instance(inst)
        rows.append(row)
        res = " ".join(f"r{p.radius:g}:{p.residual:.3g}" for p in row.probes)
        print(f"{row.instance}: oracle {row.oracle:.6g} hidden {row.hidden:.6g} gated {row.gated:.6g} | {res}")
    out = Path(args.out) if args.out else _out_dir(cfg) / "manifold.csv"
    write_report(out, rows)
    print(f"wrote {out}")
    return 0


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic, write_dataset

    samples = gen_synthetic(args.count, args.classes, args.size, args.seed, args.ignore_fraction)
    manifest = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples and {manifest}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config(args)
    rows = flops_table(cfg.network_spec(), args.height, args.width)
    print(f"{'variant':<10} {'total':>12} {'main':>12} {'mini':>10} {'hp':>10} {'overhead':>9}")
    for r in rows:
        print(
            f"{r['variant']:<10} {r['total']:>12,} {r['main']:>12,} {r['mini']:>10,} "
            f"{r['hp_modules']:>10,} {100 * r['overhead_ratio']:>8.2f}%"
        )
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="hpsnet", description=__doc__, formatter_class=fmt, epilog=keys_help())
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys_help(), formatter_class=fmt)
        if config:
            p.add_argument("--config", help="config file (key = value lines)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=fn)
        return p

    add("train", cmd_train, "train a network; writes checkpoint.hpsn and metrics.csv")
    p = add("eval", cmd_eval, "per-class IoU CSV and mIoU for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="image_path,label_path manifest (default: the configured test set)")
    p.add_argument("--out", help="IoU CSV path (default: <out_dir>/iou.csv)")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and the HP-module", config=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=2)
    p = add("inspect-masks", cmd_inspect_masks, "render each layer's soft mask (path 0) as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0, help="index into the configured test set")
    p.add_argument("--image", help="PPM image to inspect instead of a test sample")
    p.add_argument("--labels", help="PGM labels matching --image (optional)")
    p.add_argument("--out", help="output directory (default: <out_dir>/masks)")
    p = add("manifold", cmd_manifold, "oracle / gated / hidden reachable-loss report")
    p.add_argument("--out", help="CSV path (default: <out_dir>/manifold.csv)")
    p = add("gen-data", cmd_gen_data, "write synthetic PPM/PGM samples and a manifest", config=False)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ignore-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p = add("flops", cmd_flops, "analytic FLOPs per variant")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (IoError, OSError) as e:
        print(f"hpsnet: I/O error: {e}", file=sys.stderr)
        return 2
    except HpsError as e:
        print(f"hpsnet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
