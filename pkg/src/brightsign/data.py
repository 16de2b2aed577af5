"""Dataset provisioning and image plumbing.

The synthetic generator renders one fixed stroke glyph per class (lines and
arcs on the pixel grid) with per-example seeded jitter: integer translation
up to 2 px, a brightness scale in [0.6, 1.0], and additive uniform noise of
amplitude 0.05.  Example i is produced from a substream keyed by (seed, i),
so growing a dataset extends it without reshuffling what came before.

Also here: IDX-format ingestion for substituting a real dataset,
correct-classification filtering, and binary PGM/PPM export.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as _rng
from .nn import TrainedModel, predict_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64 in [0, class_count)
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{images.shape[0]} images vs labels shape {labels.shape}")
        if images.size and not (np.isfinite(images).all()
                                and images.min() >= 0.0 and images.max() <= 1.0):
            raise ValueError("pixel values must be finite and lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.name)


@dataclass(frozen=True)
class EvalSubset:
    """Indices of examples every listed model classifies correctly."""

    indices: np.ndarray
    model_names: tuple[str, ...]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "model_names", tuple(self.model_names))

    def __len__(self):
        return self.indices.shape[0]

    def truncate(self, limit: int) -> "EvalSubset":
        return EvalSubset(self.indices[:limit], self.model_names)


# --------------------------------------------------------------------------
# synthetic glyphs
# --------------------------------------------------------------------------

# Stroke language: ("line", x0, y0, x1, y1, intensity) or
# ("arc", cx, cy, radius, a0, a1, intensity) in unit coordinates (x right,
# y down); arc angles in degrees, points at (cx + r cos t, cy + r sin t).
#
# Classes come in pairs: a strong "group" shape shared by the pair plus a
# faint horizontal bar whose vertical position encodes which member of the
# pair an image belongs to.  The bar position differs by less than the
# translation jitter, so it only reads relative to the group shape, and its
# low contrast keeps it useful but never robust against perturbation at the
# customary attack budget.  Glyphs sit on a mid-gray pedestal so that global
# brightness changes move the whole operating range instead of rescaling a
# black background.
_BACKGROUND = 0.50
_STRONG = 0.45
_FAINT = 0.20

_SEGMENTS = {
    "A": (.25, .2, .75, .2), "B": (.75, .2, .75, .5), "C": (.75, .5, .75, .8),
    "D": (.25, .8, .75, .8), "E": (.25, .5, .25, .8), "F": (.25, .2, .25, .5),
    "G": (.3, .5, .7, .5), "H": (.25, .2, .5, .5), "I": (.75, .2, .5, .5),
    "J": (.25, .8, .5, .5), "K": (.75, .8, .5, .5), "M": (.5, .2, .5, .5),
    "N": (.5, .5, .5, .8),
}

# 13 group shapes x 2 bar positions = 26 classes.
_GROUP_SHAPES = (
    "BC", "AD", "HIJK", "ABC", "AFED", "MN", "HK", "IJ", "ABCD", "AMN", "FE",
    ("arc", .5, .5, .30, 0, 360),
    ("arc", .5, .5, .30, 90, 270),
)


def _class_strokes(class_id: int):
    group, bit = class_id // 2, class_id % 2
    shape = _GROUP_SHAPES[group]
    if isinstance(shape, str):
        strokes = [("line", *_SEGMENTS[ch], _STRONG) for ch in shape]
    else:
        strokes = [(*shape, _STRONG)]
    bar_y = 0.35 + 0.25 * bit
    strokes.append(("line", .30, bar_y, .85, bar_y, _FAINT))
    return tuple(strokes)


GLYPH_STROKES = tuple(_class_strokes(c) for c in range(26))

_PAD = 2  # head room for +-2 px translation jitter


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    if denom == 0:
        return np.hypot(px - x0, py - y0)
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _arc_distance(px, py, cx, cy, r, a0, a1):
    dx, dy = px - cx, py - cy
    rad = np.hypot(dx, dy)
    if a1 - a0 >= 360.0:
        return np.abs(rad - r)
    theta = np.degrees(np.arctan2(dy, dx)) % 360.0
    in_range = (theta - (a0 % 360.0)) % 360.0 <= (a1 - a0)
    ring = np.abs(rad - r)
    ends = []
    for a in (a0, a1):
        ex = cx + r * np.cos(np.radians(a))
        ey = cy + r * np.sin(np.radians(a))
        ends.append(np.hypot(px - ex, py - ey))
    return np.where(in_range, ring, np.minimum(*ends))


def _render_template(class_id: int, h: int, w: int) -> np.ndarray:
    """Padded (h+2*_PAD, w+2*_PAD) canvas with the class glyph, values in [0,1]."""
    strokes = GLYPH_STROKES[class_id]
    ys, xs = np.mgrid[0:h + 2 * _PAD, 0:w + 2 * _PAD].astype(np.float64)
    scale = min(h, w)
    core, edge = 0.02 * scale, 0.08 * scale  # stroke half-widths in pixels
    canvas = np.full_like(xs, _BACKGROUND)
    for stroke in strokes:
        if stroke[0] == "line":
            _, x0, y0, x1, y1, intensity = stroke
            d = _segment_distance(xs, ys, _PAD + x0 * (w - 1), _PAD + y0 * (h - 1),
                                  _PAD + x1 * (w - 1), _PAD + y1 * (h - 1))
        else:
            _, cx, cy, r, a0, a1, intensity = stroke
            d = _arc_distance(xs, ys, _PAD + cx * (w - 1), _PAD + cy * (h - 1),
                              r * scale, a0, a1)
        lit = intensity * np.clip((edge - d) / (edge - core), 0.0, 1.0)
        canvas = np.maximum(canvas, _BACKGROUND + lit)
    return np.clip(canvas, 0.0, 1.0)


_template_cache: dict[tuple[int, int, int], np.ndarray] = {}


def _template(class_id: int, h: int, w: int) -> np.ndarray:
    key = (class_id, h, w)
    if key not in _template_cache:
        _template_cache[key] = _render_template(class_id, h, w)
    return _template_cache[key]


def generate_synthetic(n: int, k: int, size: tuple[int, int, int], seed: int,
                       name: str = "synthetic") -> Dataset:
    """Deterministic glyph dataset: n examples, k balanced classes, (C,H,W) images."""
    c, h, w = (int(d) for d in size)
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if not 1 <= k <= len(GLYPH_STROKES):
        raise ValueError(f"k must be in [1, {len(GLYPH_STROKES)}], got {k}")
    if h != w or h < 12:
        raise ValueError(f"images must be square with side >= 12, got {h}x{w}")
    if c < 1:
        raise ValueError(f"channel count must be >= 1, got {c}")

    images = np.empty((n, c, h, w))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % k
        gen = _rng.generator(seed, _rng.DOMAIN_DATA, i)
        dy = int(gen.integers(-_PAD, _PAD + 1))
        dx = int(gen.integers(-_PAD, _PAD + 1))
        brightness = gen.uniform(0.6, 1.0)
        pad = _template(label, h, w)
        glyph = pad[_PAD - dy:_PAD - dy + h, _PAD - dx:_PAD - dx + w] * brightness
        img = np.broadcast_to(glyph, (c, h, w)) + gen.uniform(-0.05, 0.05, size=(c, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return Dataset(images, labels, class_count=k, name=name)


# --------------------------------------------------------------------------
# IDX ingestion
# --------------------------------------------------------------------------

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_u32s(blob: bytes, count: int, path, what: str):
    if len(blob) < 4 * count:
        raise ValueError(f"{path}: truncated {what} (wanted {4 * count} header bytes)")
    return struct.unpack(f">{count}I", blob[:4 * count]), blob[4 * count:]


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Parse big-endian IDX image/label files into a Dataset (pixels scaled by /255)."""
    images_path, labels_path = Path(images_path), Path(labels_path)

    blob = images_path.read_bytes()
    (magic, count, rows, cols), rest = _read_u32s(blob, 4, images_path, "image file")
    if magic != _IDX_IMAGE_MAGIC:
        raise ValueError(f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{_IDX_IMAGE_MAGIC:08x}")
    expected = count * rows * cols
    if len(rest) < expected:
        raise ValueError(f"{images_path}: truncated image data ({len(rest)} of {expected} bytes)")
    if len(rest) > expected:
        raise ValueError(f"{images_path}: {len(rest) - expected} trailing bytes")
    pixels = np.frombuffer(rest, dtype=np.uint8).reshape(count, 1, rows, cols)

    blob = labels_path.read_bytes()
    (magic, label_count), rest = _read_u32s(blob, 2, labels_path, "label file")
    if magic != _IDX_LABEL_MAGIC:
        raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{_IDX_LABEL_MAGIC:08x}")
    if label_count != count:
        raise ValueError(f"count mismatch: {count} images vs {label_count} labels")
    if len(rest) < label_count:
        raise ValueError(f"{labels_path}: truncated label data ({len(rest)} of {label_count} bytes)")
    if len(rest) > label_count:
        raise ValueError(f"{labels_path}: {len(rest) - label_count} trailing bytes")
    labels = np.frombuffer(rest, dtype=np.uint8).astype(np.int64)

    k = class_count if class_count is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, class_count=k,
                   name=images_path.stem)


# --------------------------------------------------------------------------
# filtering and export
# --------------------------------------------------------------------------

def filter_correct(dataset: Dataset, models: list[TrainedModel]) -> EvalSubset:
    """Indices every model classifies correctly, in original order."""
    if not models:
        raise ValueError("filter_correct needs at least one model")
    keep = np.ones(len(dataset), dtype=bool)
    for model in models:
        keep &= predict_batch(model, dataset.images) == dataset.labels
    if not keep.any():
        log.warning("filter_correct: no example is classified correctly by all %d models",
                    len(models))
    return EvalSubset(np.nonzero(keep)[0], tuple(m.name for m in models))


def export_images(tensors, directory, prefix: str) -> list[Path]:
    """Write each (C,H,W) image as binary PGM (C=1) or PPM (C=3), maxval 255."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(np.asarray(tensors, dtype=np.float64)):
        if img.ndim != 3 or img.shape[0] not in (1, 3):
            raise ValueError(f"image {i}: expected (1,H,W) or (3,H,W), got {img.shape}")
        c, h, w = img.shape
        bytes_ = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
        if c == 1:
            path = directory / f"{prefix}_{i}.pgm"
            payload = b"P5\n%d %d\n255\n" % (w, h) + bytes_[0].tobytes()
        else:
            path = directory / f"{prefix}_{i}.ppm"
            payload = b"P6\n%d %d\n255\n" % (w, h) + bytes_.transpose(1, 2, 0).tobytes()
        path.write_bytes(payload)
        paths.append(path)
    return paths
