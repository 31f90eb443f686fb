"""Main-branch / mini-branch residual networks and their path-selection variants.

Layers are the residual blocks, numbered globally from 0.  Every block
receives an identity (or projected) skip path and a conv-relu-conv residual
path.  The first block of each stage additionally receives the final output of
the stage before the previous one (the stem output, or the image for stage 1),
resized and projected, as an extra alternative path.

The mini-branch has the same topology with ``mini_channels`` everywhere and
no path selection; its stage-final outputs are the hidden variables.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .hp_module import (
    DEFAULT_RANGE,
    STAGE_ENTRY_RANGE,
    HpParams,
    SoftMask,
    expected_deviation,
    make_mask,
    select_paths,
)
from .ops import (
    ConvParams,
    add,
    avgpool_stride2,
    conv2d,
    expand,
    relu,
    resize_nearest,
    resize_to,
    spatial_mean,
    sub,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "gated", "hps", "hps_ps", "hps_fh", "hps_ig")
VARIANT_ALIASES = {"ps": "hps_ps", "fh": "hps_fh", "ig": "hps_ig"}
_NEEDS_MINI = {"hps", "hps_ps", "hps_ig"}
INPUT_MEAN = 0.5
RESIDUAL_GAIN = 0.2
EXTRA_GAIN = 0.5
HEAD_GAIN = 0.1
# stage-entry masks start at (0.96, 0.52, 0.52) for (skip, residual, extra)
# instead of 2/3 each, so the skip path keeps near-unit weight
ENTRY_SKIP_BIAS = float(np.log(0.48 / 0.26))
_USES_HIDDEN_INPUT = {"hps", "hps_ps", "hps_fh", "hps_ig"}


def canonical_variant(name):
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    downsample: bool = True


@dataclass(frozen=True)
class LayerInfo:
    index: int
    stage: int
    entry: bool
    final: bool
    in_channels: int
    out_channels: int
    stride: int
    paths: int


@dataclass
class NetworkSpec:
    stages: list
    mini_channels: int
    num_classes: int
    variant: str = "hps"
    in_channels: int = 3
    stem_channels: Optional[int] = None
    reduce_channels: int = 32
    hps_layers: Optional[frozenset] = None  # None -> every residual block
    alpha_beta: dict = field(default_factory=dict)  # layer -> (alpha, beta) overrides

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages]
        self.variant = canonical_variant(self.variant)
        if self.stem_channels is None:
            self.stem_channels = self.stages[0].channels if self.stages else 0
        self.validate()

    def validate(self):
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        for s in self.stages:
            if s.blocks < 1 or s.channels < 1:
                raise ConfigError(f"bad stage {s}")
        for name in ("mini_channels", "num_classes", "in_channels", "stem_channels", "reduce_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        n = self.num_layers
        for d in self.selected_layers:
            if not 0 <= d < n:
                raise ConfigError(f"hps layer {d} outside 0..{n - 1}")
        for d, (a, b) in self.alpha_beta.items():
            if not a < b:
                raise ConfigError(f"layer {d}: alpha {a} must be < beta {b}")

    @property
    def num_layers(self):
        return sum(s.blocks for s in self.stages)

    @property
    def selected_layers(self):
        """Layer indices that apply path selection (the set L_d)."""
        if self.hps_layers is None:
            return frozenset(range(self.num_layers))
        return frozenset(self.hps_layers)

    @property
    def hidden_layers(self):
        """Stage-final layer indices whose mini-branch outputs are hidden variables (H_d)."""
        return tuple(l.index for l in self.layers() if l.final)

    def hidden_index(self, d):
        """min{d_m in H_d : d <= d_m}."""
        candidates = [m for m in self.hidden_layers if d <= m]
        if not candidates:
            raise ConfigError(f"layer {d} has no hidden variable at or after it")
        return min(candidates)

    def layers(self, mini=False):
        out = []
        d = 0
        in_ch = self.mini_channels if mini else self.stem_channels
        for si, st in enumerate(self.stages):
            ch = self.mini_channels if mini else st.channels
            for b in range(st.blocks):
                entry = b == 0
                stride = 2 if entry and st.downsample else 1
                out.append(
                    LayerInfo(d, si, entry, b == st.blocks - 1, in_ch, ch, stride, 3 if entry else 2)
                )
                in_ch = ch
                d += 1
        return out

    def range_for(self, layer: LayerInfo):
        if layer.index in self.alpha_beta:
            return tuple(self.alpha_beta[layer.index])
        return STAGE_ENTRY_RANGE if layer.entry else DEFAULT_RANGE

    def spatial_sizes(self, height, width):
        """Output (h, w) of every stage for an input of the given size."""
        sizes = []
        for st in self.stages:
            if st.downsample:
                height = (height - 1) // 2 + 1
                width = (width - 1) // 2 + 1
            sizes.append((height, width))
        return sizes

    def with_variant(self, variant):
        return replace(self, variant=variant, stages=list(self.stages), alpha_beta=dict(self.alpha_beta))


def toy_spec(variant="hps", num_classes=4, **overrides):
    """The shipped desk-scale configuration."""
    kw = dict(
        stages=[StageSpec(2, 16, True), StageSpec(2, 32, True), StageSpec(2, 64, True)],
        mini_channels=2,
        num_classes=num_classes,
        variant=variant,
        reduce_channels=3,
    )
    kw.update(overrides)
    return NetworkSpec(**kw)


# ------------------------------------------------------------------ parameters


class ParameterStore:
    """Named parameter tensors.  Convolutions store ``<name>.w`` and ``<name>.b``."""

    def __init__(self, tensors=None, seed=0):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.seed = seed

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise ConfigError(f"parameter {name!r} missing from store") from None

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name, value: Tensor):
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name!r}")
        self.tensors[name] = value

    def add_conv(self, name, out_ch, in_ch, k, gain=1.0):
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        std = gain * np.sqrt(2.0 / (in_ch * k * k))
        self.add(name + ".w", Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)), requires_grad=True))
        self.add(name + ".b", Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True))

    def conv(self, name, stride=1, padding=None) -> ConvParams:
        return ConvParams(self[name + ".w"], self[name + ".b"], stride, padding)

    def has_conv(self, name):
        return name + ".w" in self.tensors

    def count(self, prefix=""):
        return int(sum(t.data.size for n, t in self.tensors.items() if n.startswith(prefix)))

    def astype(self, dtype):
        return ParameterStore(
            {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
            seed=self.seed,
        )

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype if self.tensors else np.dtype(np.float64)

    def hp(self, spec: NetworkSpec, layer: LayerInfo) -> HpParams:
        alpha, beta = spec.range_for(layer)
        return HpParams(self.conv(f"hp.{layer.index}.reduce"), self.conv(f"hp.{layer.index}.mask"), alpha, beta)


def _add_trunk(store, spec, branch, mini):
    stem_ch = spec.mini_channels if mini else spec.stem_channels
    store.add_conv(f"{branch}.stem", stem_ch, spec.in_channels, 3)
    boundary_ch = [spec.in_channels, stem_ch]
    for layer in spec.layers(mini=mini):
        p = f"{branch}.{layer.index}"
        store.add_conv(p + ".conv1", layer.out_channels, layer.in_channels, 3)
        # without normalisation layers the path sums grow every block; damping
        # the residual and extra paths at init keeps activations near unit scale
        store.add_conv(p + ".conv2", layer.out_channels, layer.out_channels, 3, gain=RESIDUAL_GAIN)
        if layer.in_channels != layer.out_channels:
            store.add_conv(p + ".proj", layer.out_channels, layer.in_channels, 1)
        if layer.entry:
            extra_ch = boundary_ch[-2]
            if extra_ch != layer.out_channels:
                store.add_conv(p + ".extra_proj", layer.out_channels, extra_ch, 1, gain=EXTRA_GAIN)
        if layer.final:
            boundary_ch.append(layer.out_channels)


def init_params(spec: NetworkSpec, seed=0) -> ParameterStore:
    """Seeded initialisation.  Each tensor draws from its own name-keyed stream,
    so parameters shared between variants are identical for one seed."""
    store = ParameterStore(seed=seed)
    _add_trunk(store, spec, "main", mini=False)
    last = spec.stages[-1].channels
    store.add_conv("main.head", spec.num_classes, last, 3, gain=HEAD_GAIN)
    if spec.variant in _NEEDS_MINI:
        _add_trunk(store, spec, "mini", mini=True)
    if spec.variant != "baseline":
        r = spec.reduce_channels
        for layer in spec.layers():
            if layer.index not in spec.selected_layers:
                continue
            mask_in = r + (spec.mini_channels if spec.variant in _USES_HIDDEN_INPUT else 0)
            store.add_conv(f"hp.{layer.index}.reduce", r, layer.out_channels, 3)
            store.add_conv(f"hp.{layer.index}.mask", layer.paths, mask_in, 3, gain=0.1)
            if layer.entry:
                store[f"hp.{layer.index}.mask.b"].data[0, 0] = ENTRY_SKIP_BIAS
            alpha, beta = spec.range_for(layer)
            log.debug(
                "layer %d: mask range [%g, %g], expected |W - W_opt| = %g",
                layer.index, alpha, beta, expected_deviation(alpha, beta),
            )
    return store


# -------------------------------------------------------------------- forward


def _block_paths(x, extra_src, layer, params, branch):
    p = f"{branch}.{layer.index}"
    r = relu(conv2d(x, params.conv(p + ".conv1", stride=layer.stride)))
    r = conv2d(r, params.conv(p + ".conv2"))
    skip = avgpool_stride2(x) if layer.stride == 2 else x
    if skip.shape[2:] != r.shape[2:]:
        skip = resize_nearest(skip, *r.shape[2:])
    if params.has_conv(p + ".proj"):
        skip = conv2d(skip, params.conv(p + ".proj"))
    paths = [skip, r]
    if layer.entry:
        extra = resize_to(extra_src, *r.shape[2:])
        if params.has_conv(p + ".extra_proj"):
            extra = conv2d(extra, params.conv(p + ".extra_proj"))
        paths.append(extra)
    return paths


def _sum(paths):
    out = paths[0]
    for pth in paths[1:]:
        out = add(out, pth)
    return out


def _check_image(image, spec):
    if image.shape[1] != spec.in_channels:
        raise ShapeError("network", image.shape, detail=f"expected {spec.in_channels} input channels")


def _centre(image):
    # images live in [0, 1]; a zero-mean input keeps the un-normalised sums tame
    return sub(image, Tensor(np.full(image.shape, INPUT_MEAN, dtype=image.dtype)))


def forward_mini(image: Tensor, spec: NetworkSpec, params: ParameterStore) -> dict:
    """Mini-branch pass.  Returns ``{stage-final layer index: hidden features}``."""
    _check_image(image, spec)
    image = _centre(image)
    x = relu(conv2d(image, params.conv("mini.stem")))
    boundaries = [image, x]
    hidden = {}
    for layer in spec.layers(mini=True):
        x = _sum(_block_paths(x, boundaries[-2], layer, params, "mini"))
        if layer.final:
            hidden[layer.index] = x
            boundaries.append(x)
    return hidden


def _ones_mask(f, paths, alpha, beta):
    n, _, h, w = f.shape
    return SoftMask(Tensor(np.ones((n, paths, h, w), dtype=f.dtype)), alpha, beta)


def build_variant_mask(f: Tensor, hidden: Optional[Tensor], p: HpParams, variant: str) -> SoftMask:
    variant = canonical_variant(variant)
    if variant == "baseline":
        return _ones_mask(f, p.paths, p.alpha, p.beta)
    if variant == "gated":
        return make_mask(f, None, replace(p, cut_gradients=False))
    if hidden is None:
        raise ConfigError(f"variant {variant} needs hidden variables")
    if variant == "hps_fh":
        zeros = Tensor(np.zeros(hidden.shape, dtype=f.dtype))
        return make_mask(f, zeros, replace(p, cut_gradients=True))
    if variant == "hps_ig":
        return make_mask(f, hidden, replace(p, cut_gradients=False))
    mask = make_mask(f, hidden, replace(p, cut_gradients=True))
    if variant == "hps_ps":
        shared = expand(spatial_mean(mask.values), mask.values.shape)
        mask = SoftMask(shared, mask.alpha, mask.beta)
    return mask


def forward_main(
    image: Tensor,
    hidden: Optional[dict],
    spec: NetworkSpec,
    params: ParameterStore,
    force_unit_masks=False,
    masks: Optional[dict] = None,
) -> Tensor:
    """Main-branch pass returning per-class logits at input resolution.

    ``force_unit_masks`` replaces every generated mask by ones (identity
    reduction).  If ``masks`` is a dict it is filled with ``{layer: SoftMask}``.
    """
    _check_image(image, spec)
    variant = spec.variant
    if variant in _NEEDS_MINI and not force_unit_masks:
        missing = [m for m in spec.hidden_layers if not hidden or m not in hidden]
        if missing:
            raise ConfigError(f"variant {variant} needs hidden variables for layers {missing}")
    size = image.shape[2:]
    image = _centre(image)
    x = relu(conv2d(image, params.conv("main.stem")))
    boundaries = [image, x]
    selected = spec.selected_layers
    for layer in spec.layers():
        paths = _block_paths(x, boundaries[-2], layer, params, "main")
        if variant == "baseline" or layer.index not in selected:
            x = _sum(paths)
        else:
            f = paths[0]
            if force_unit_masks:
                alpha, beta = spec.range_for(layer)
                mask = _ones_mask(f, layer.paths, alpha, beta)
            else:
                h = None
                if variant in _NEEDS_MINI:
                    h = hidden[spec.hidden_index(layer.index)]
                elif variant == "hps_fh":
                    n, _, fh, fw = f.shape
                    h = Tensor(np.zeros((n, spec.mini_channels, fh, fw), dtype=f.dtype))
                mask = build_variant_mask(f, h, params.hp(spec, layer), variant)
            if masks is not None:
                masks[layer.index] = mask
            x = select_paths(paths, mask)
        if layer.final:
            boundaries.append(x)
    logits = conv2d(x, params.conv("main.head"))
    return resize_nearest(logits, *size)


def forward(image: Tensor, spec: NetworkSpec, params: ParameterStore, masks=None) -> Tensor:
    """Mini-branch first (when the variant uses it), then the main branch."""
    hidden = forward_mini(image, spec, params) if spec.variant in _NEEDS_MINI else None
    return forward_main(image, hidden, spec, params, masks=masks)


def predict(logits) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 4:
        raise ContractError(f"predict expects (n, c, h, w) logits, got {data.shape}")
    return np.argmax(data, axis=1)
