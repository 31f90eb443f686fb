"""Flat ``key = value`` run configuration with dotted section prefixes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .networks import NetworkSpec, StageSpec, canonical_variant
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    help: str


def _ints(text):
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


KEYS = [
    Key("run.seed", 0, "seed for initialisation, shuffling and flips"),
    Key("run.out_dir", "runs/default", "directory for checkpoints, metrics and reports"),
    Key("network.variant", "hps", "hps | gated | ps | fh | ig | baseline"),
    Key("network.stage_channels", (16, 32, 64), "main-branch channels per stage"),
    Key("network.stage_blocks", (2, 2, 2), "residual blocks per stage"),
    Key("network.downsample", (1, 1, 1), "1 if a stage starts with a stride-2 block"),
    Key("network.mini_channels", 2, "mini-branch channels (hidden-variable width)"),
    Key("network.reduce_channels", 3, "channels after the mask generator's reduce conv"),
    Key("network.hps_layers", "all", "comma-separated layer indices using path selection, or 'all'"),
    Key("train.base_lr", 0.007, "initial learning rate"),
    Key("train.momentum", 0.9, "SGD momentum"),
    Key("train.weight_decay", 1e-4, "L2 decay on conv weights"),
    Key("train.poly_power", 0.9, "poly schedule exponent"),
    Key("train.batch_size", 8, "samples per step"),
    Key("train.epochs", 15, "passes over the training set"),
    Key("train.flip_augment", True, "random joint horizontal/vertical flips"),
    Key("train.dtype", "float32", "float32 | float64"),
    Key("data.classes", 4, "number of classes"),
    Key("data.size", 64, "synthetic image side length"),
    Key("data.patch", 64, "crop patch side length"),
    Key("data.train_count", 200, "synthetic training images"),
    Key("data.test_count", 50, "synthetic test images"),
    Key("data.seed", 1000, "synthetic data seed (the test set uses seed + 1)"),
    Key("data.ignore_fraction", 0.5, "fraction of region-boundary pixels labelled 255"),
    Key("data.train_manifest", "", "manifest of PPM/PGM training pairs; replaces synthetic data"),
    Key("data.test_manifest", "", "manifest of PPM/PGM test pairs; replaces synthetic data"),
    Key("manifold.resolution", 5, "oracle grid points per mask dimension"),
    Key("manifold.restarts", 20, "seeded SGD restarts per constrained family"),
    Key("manifold.steps", 2000, "SGD steps per restart"),
    Key("manifold.lr", 0.05, "SGD learning rate for the constrained families"),
]
DEFAULTS = {k.name: k.default for k in KEYS}
_BOOL = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _coerce(name, raw):
    default = DEFAULTS[name]
    text = str(raw).strip()
    if isinstance(default, bool):
        if text.lower() not in _BOOL:
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return _BOOL[text.lower()]
    if isinstance(default, tuple):
        return _ints(text)
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def keys_help() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = ["config keys (key = value, '#' starts a comment):"]
    for k in KEYS:
        lines.append(f"  {k.name:<{width}}  default {_format(k.default):<14} {k.help}")
    return "\n".join(lines)


class RunConfig:
    """Merged view of network, training, data and output settings."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for name, raw in (values or {}).items():
            self.set(name, raw)

    def set(self, name, raw):
        if name not in DEFAULTS:
            raise ConfigError(f"unknown config key {name!r}")
        self.values[name] = _coerce(name, raw)

    def __getitem__(self, name):
        return self.values[name]

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        seen = set()
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in body.split("=", 1))
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            try:
                cfg.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(), str(path))

    def dump(self) -> str:
        return "".join(f"{k.name} = {_format(self.values[k.name])}\n" for k in KEYS)

    def network_spec(self) -> NetworkSpec:
        ch, bl, ds = (self[f"network.{k}"] for k in ("stage_channels", "stage_blocks", "downsample"))
        if not len(ch) == len(bl) == len(ds):
            raise ConfigError("stage_channels, stage_blocks and downsample need equal lengths")
        layers = self["network.hps_layers"].strip()
        hps_layers = None if layers.lower() == "all" else frozenset(_ints(layers))
        return NetworkSpec(
            stages=[StageSpec(b, c, bool(d)) for c, b, d in zip(ch, bl, ds)],
            mini_channels=self["network.mini_channels"],
            num_classes=self["data.classes"],
            variant=canonical_variant(self["network.variant"]),
            reduce_channels=self["network.reduce_channels"],
            hps_layers=hps_layers,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self["train.base_lr"],
            momentum=self["train.momentum"],
            weight_decay=self["train.weight_decay"],
            poly_power=self["train.poly_power"],
            batch_size=self["train.batch_size"],
            epochs=self["train.epochs"],
            seed=self["run.seed"],
            flip_augment=self["train.flip_augment"],
            dtype=self["train.dtype"],
        )
