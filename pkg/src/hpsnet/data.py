"""Synthetic segmentation samples, PPM/PGM raster I/O, patch cropping and label remapping."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, IoError, ShapeError
from .ops import IGNORE_LABEL

GID15_CLASSES = (
    "paddy field",
    "irrigated land",
    "dry cropland",
    "garden land",
    "arbor forest",
    "shrub land",
    "natural meadow",
    "artificial meadow",
    "industrial land",
    "urban residential",
    "rural residential",
    "traffic land",
    "river",
    "lake",
    "pond",
)
GID5_CLASSES = ("farmland", "forest", "meadow", "built-up", "water")


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float in [0, 1]
    labels: np.ndarray  # (H, W) integer, classes or IGNORE_LABEL
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise ShapeError("Sample", self.image.shape, detail="image must be (1, c, H, W)")
        if self.labels.shape != self.image.shape[2:]:
            raise ShapeError("Sample", self.image.shape, self.labels.shape, detail="label raster size")
        if not np.all(np.isfinite(self.image)):
            raise DataError(f"sample {self.id!r}: non-finite image values")


@dataclass(frozen=True)
class LabelHierarchy:
    fine_names: tuple
    coarse_names: tuple
    fine_to_coarse: dict

    def table(self):
        lut = np.full(256, -1, dtype=np.int64)
        for f, c in self.fine_to_coarse.items():
            lut[f] = c
        lut[IGNORE_LABEL] = IGNORE_LABEL
        return lut


def gid_hierarchy() -> LabelHierarchy:
    """The 15 fine classes (in Table-I column order) grouped under the 5 coarse ones."""
    groups = {0: (0, 1, 2), 1: (3, 4, 5), 2: (6, 7), 3: (8, 9, 10, 11), 4: (12, 13, 14)}
    mapping = {f: c for c, fines in groups.items() for f in fines}
    return LabelHierarchy(GID15_CLASSES, GID5_CLASSES, mapping)


def identity_hierarchy(n) -> LabelHierarchy:
    names = tuple(f"class_{i}" for i in range(n))
    return LabelHierarchy(names, names, {i: i for i in range(n)})


def remap_labels(labels, hierarchy: LabelHierarchy) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise DataError("labels outside 0..255")
    out = hierarchy.table()[labels.astype(np.int64)]
    if (out < 0).any():
        bad = int(labels[out < 0].reshape(-1)[0])
        raise DataError(f"label {bad} has no coarse mapping")
    return out.astype(labels.dtype if labels.dtype.kind in "iu" else np.int64)


# ------------------------------------------------------------------- synthesis


def class_palette(classes, seed=2021):
    """Fixed per-class rendering parameters, identical across samples.

    Classes come in pairs sharing almost the same base colour, so telling them
    apart needs texture (noise level, stripe frequency and orientation).
    """
    rng = np.random.default_rng([seed, classes])
    n_pairs = (classes + 1) // 2
    pair_colors = rng.uniform(0.2, 0.8, size=(n_pairs, 3))
    base = np.repeat(pair_colors, 2, axis=0)[:classes]
    base = base + rng.normal(0, 0.02, size=base.shape)
    noise = np.where(np.arange(classes) % 2 == 0, rng.uniform(0.01, 0.03, classes), rng.uniform(0.12, 0.18, classes))
    freq = rng.uniform(0.15, 0.3, classes)
    stripe_amp = np.where(np.arange(classes) % 2 == 0, 0.06, 0.0) + rng.uniform(0.0, 0.02, classes)
    angle = rng.uniform(0, np.pi, classes)
    return {"base": base, "noise": noise, "freq": freq, "stripe_amp": stripe_amp, "angle": angle}


def voronoi_labels(size, classes, rng):
    n_seeds = int(rng.integers(classes + 2, 2 * classes + 5))
    pts = rng.uniform(0, size, size=(n_seeds, 2))
    seed_cls = rng.integers(0, classes, n_seeds)
    # every class present in most samples: first seeds cycle through classes
    seed_cls[: min(classes, n_seeds)] = rng.permutation(classes)[: min(classes, n_seeds)]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return seed_cls[np.argmin(d2, axis=-1)]


def boundary_mask(labels):
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def render(labels, classes, rng, palette=None):
    pal = palette or class_palette(classes)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    phase = rng.uniform(0, 2 * np.pi)
    for c in range(classes):
        sel = labels == c
        if not sel.any():
            continue
        proj = xx[sel] * np.cos(pal["angle"][c]) + yy[sel] * np.sin(pal["angle"][c])
        stripe = pal["stripe_amp"][c] * np.sin(2 * np.pi * pal["freq"][c] * proj + phase)
        for ch in range(3):
            img[ch][sel] = pal["base"][c, ch] + stripe + pal["noise"][c] * rng.normal(size=sel.sum())
    img += rng.normal(0, 0.03)  # per-image brightness shift
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(count, classes, size, seed, ignore_fraction=0.5) -> list:
    """Seeded Voronoi label maps rendered with class-specific colour and texture.

    A fraction ``ignore_fraction`` of region-boundary pixels is set to 255.
    """
    if classes < 2 or classes > 255:
        raise ContractError(f"classes must be in 2..255, got {classes}")
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    if not 0.0 <= ignore_fraction <= 1.0:
        raise ContractError(f"ignore_fraction must be in [0, 1], got {ignore_fraction}")
    pal = class_palette(classes)
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        labels = voronoi_labels(size, classes, rng)
        img = render(labels, classes, rng, pal)
        drop = boundary_mask(labels) & (rng.random(labels.shape) < ignore_fraction)
        labels = np.where(drop, IGNORE_LABEL, labels).astype(np.uint8)
        # quantise once so a PPM round trip is exact
        img = np.rint(img * 255.0) / 255.0
        out.append(Sample(img[None], labels, f"syn{seed}_{i:05d}"))
    return out


def crop_patches(sample: Sample, patch: int) -> list:
    """Non-overlapping grid tiling; trailing rows/columns that do not fill a patch are dropped."""
    h, w = sample.labels.shape
    if patch < 1 or patch > h or patch > w:
        raise ContractError(f"patch {patch} does not fit a {h}x{w} sample")
    out = []
    for i in range(h // patch):
        for j in range(w // patch):
            ys, xs = slice(i * patch, (i + 1) * patch), slice(j * patch, (j + 1) * patch)
            out.append(
                Sample(sample.image[:, :, ys, xs].copy(), sample.labels[ys, xs].copy(), f"{sample.id}_r{i}_c{j}")
            )
    return out


def flip_pair(image, labels, horizontal, vertical):
    """Flip an (n, c, H, W) image and its (n, H, W) labels together."""
    if horizontal:
        image, labels = image[..., ::-1], labels[..., ::-1]
    if vertical:
        image, labels = image[..., ::-1, :], labels[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def batch(samples, dtype=np.float64):
    images = np.concatenate([s.image for s in samples], axis=0).astype(dtype)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------- rasters


def _parse_header(buf, path):
    """Parse a binary PNM header.  Returns (magic, width, height, maxval, payload offset)."""
    if len(buf) < 2:
        raise IoError("file too short for a PNM header", 0, path)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise IoError(f"unsupported magic {magic!r}", 0, path)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch == b"#":
                nl = buf.find(b"\n", pos)
                if nl < 0:
                    raise IoError("unterminated header comment", pos, path)
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise IoError("expected a decimal header field", start, path)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise IoError("header must end with one whitespace byte", pos, path)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise IoError(f"bad dimensions {width}x{height}", 2, path)
    if maxval != 255:
        raise IoError(f"only maxval 255 is supported, got {maxval}", pos - 1, path)
    return magic.decode(), width, height, maxval, pos


def decode_pnm(buf, path=None) -> np.ndarray:
    """Decode P5 (-> (H, W)) or P6 (-> (H, W, 3)) bytes into uint8."""
    magic, width, height, _, off = _parse_header(buf, path)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    have = len(buf) - off
    if have < need:
        raise IoError(f"truncated payload: need {need} bytes, have {have}", off + have, path)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def encode_pnm(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ContractError(f"PNM payload must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError("encode_pnm", arr.shape, detail="expected (H, W) or (H, W, 3)")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_pnm(buf, path)


def write_pnm(path, arr):
    data = encode_pnm(arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def image_to_bytes(image) -> np.ndarray:
    """(1, 3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(image)[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_raster(sample: Sample, image_path, label_path):
    write_pnm(image_path, image_to_bytes(sample.image))
    write_pnm(label_path, sample.labels.astype(np.uint8))


def read_raster(image_path, label_path, sample_id=None) -> Sample:
    rgb = read_pnm(image_path)
    lab = read_pnm(label_path)
    if rgb.ndim != 3:
        raise IoError("image raster must be P6", 0, image_path)
    if lab.ndim != 2:
        raise IoError("label raster must be P5", 0, label_path)
    if rgb.shape[:2] != lab.shape:
        raise IoError(f"image {rgb.shape[:2]} and labels {lab.shape} differ in size", None, label_path)
    image = rgb.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    return Sample(image, lab, sample_id or Path(image_path).stem)


def write_dataset(samples, out_dir) -> Path:
    """Write every sample as PPM/PGM plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        ip, lp = out / f"{s.id}.ppm", out / f"{s.id}_labels.pgm"
        write_raster(s, ip, lp)
        lines.append(f"{ip.name},{lp.name}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list:
    """Newline-delimited ``image_path,label_path`` pairs, relative to the manifest."""
    path = Path(path)
    base = path.parent
    samples = []
    offset = 0
    for raw in path.read_bytes().splitlines(keepends=True):
        line = raw.decode().strip()
        if line and not line.startswith("#"):
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise IoError("manifest line must be 'image_path,label_path'", offset, path)
            samples.append(read_raster(base / parts[0], base / parts[1]))
        offset += len(raw)
    return samples
