"""Dataset ingestion: synthetic shape corpus, STL-10 binaries, image
directories, plus normalization statistics.

All loaders produce the same ``Dataset`` shape so the game engine never cares
where images came from. The synthetic generator is the desk-scale stand-in
corpus: white-background images of jittered dark shapes, one shape per class.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .game import make_rng

STL10_SIDE = 96
STL10_RECORD = 3 * STL10_SIDE * STL10_SIDE  # 27648 bytes per image


@dataclass
class NormStats:
    mean: np.ndarray  # per-channel, in [0,1] pixel units
    std: np.ndarray

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=np.float32),
                   std=np.asarray(d["std"], dtype=np.float32))


@dataclass
class Dataset:
    images: np.ndarray                 # (N, H, W, 3) uint8
    labels: np.ndarray | None          # (N,) int64 in [0, C) or None
    class_names: list | None
    split: str
    stats: NormStats | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (N,H,W,3), got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("label/image count mismatch")

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images.shape[1]

    @property
    def num_classes(self):
        return len(self.class_names) if self.class_names else 0


# -- synthetic shape corpus ------------------------------------------------------

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star",
               "ring", "bar_h", "bar_v", "l_shape", "zigzag")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple = SHAPE_NAMES
    resolution: int = 48
    train_per_class: int = 200
    test_per_class: int = 50
    seed: int = 0
    max_shift: float = 0.18
    scale_range: tuple = (0.75, 1.2)
    max_rotation: float = 0.45
    thickness_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class counts must be positive")
        unknown = set(self.classes) - set(SHAPE_NAMES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")


def _segment_mask(u, v, pts, t):
    d2min = None
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        dx, dy = bx - ax, by - ay
        len2 = dx * dx + dy * dy
        tt = np.clip(((u - ax) * dx + (v - ay) * dy) / len2, 0, 1)
        d2 = (u - ax - tt * dx) ** 2 + (v - ay - tt * dy) ** 2
        d2min = d2 if d2min is None else np.minimum(d2min, d2)
    return d2min <= t * t


def _shape_mask(name, u, v, t):
    rho2 = u * u + v * v
    if name == "circle":
        return rho2 <= 0.55 ** 2
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.5
    if name == "triangle":
        inside = (v >= -0.6) & (v <= 0.5)
        return inside & (np.abs(u) <= 0.6 * (v + 0.6) / 1.1)
    if name == "cross":
        return ((np.abs(u) <= t) & (np.abs(v) <= 0.62)) | \
               ((np.abs(v) <= t) & (np.abs(u) <= 0.62))
    if name == "star":
        theta = np.arctan2(v, u)
        k = np.abs(((theta % (2 * np.pi / 5)) / (2 * np.pi / 5)) * 2 - 1)
        r = 0.22 + (0.62 - 0.22) * k
        return rho2 <= r * r
    if name == "ring":
        return (rho2 <= (0.42 + t) ** 2) & (rho2 >= (0.42 - t) ** 2)
    if name == "bar_h":
        return (np.abs(v) <= t) & (np.abs(u) <= 0.66)
    if name == "bar_v":
        return (np.abs(u) <= t) & (np.abs(v) <= 0.66)
    if name == "l_shape":
        vert = (np.abs(u + 0.35) <= t) & (v >= -0.6) & (v <= 0.6)
        horz = (np.abs(v - 0.6 + t) <= t) & (u >= -0.35) & (u <= 0.5)
        return vert | horz
    if name == "zigzag":
        pts = [(-0.6, 0.45), (-0.2, -0.45), (0.2, 0.45), (0.6, -0.45)]
        return _segment_mask(u, v, pts, t)
    raise ValueError(f"unknown shape {name!r}")


def _render_shape(name, spec, rng):
    res = spec.resolution
    xs = np.linspace(-1, 1, res, dtype=np.float64)
    gx, gy = np.meshgrid(xs, xs)
    shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
    scale = rng.uniform(*spec.scale_range)
    angle = rng.uniform(-spec.max_rotation, spec.max_rotation)
    t = 0.14 * rng.uniform(*spec.thickness_range)
    ca, sa = np.cos(-angle), np.sin(-angle)
    u = ((gx - shift[0]) * ca - (gy - shift[1]) * sa) / scale
    v = ((gx - shift[0]) * sa + (gy - shift[1]) * ca) / scale
    mask = _shape_mask(name, u, v, t)
    bg = rng.integers(246, 256)
    ink = rng.integers(15, 80, size=3)
    img = np.full((res, res, 3), bg, dtype=np.uint8)
    img[mask] = ink.astype(np.uint8)
    return img


def _gen_split(spec, split, per_class, stream):
    rng = make_rng(spec.seed, stream=stream)
    images, labels = [], []
    for ci, name in enumerate(spec.classes):
        for _ in range(per_class):
            images.append(_render_shape(name, spec, rng))
            labels.append(ci)
    return Dataset(images=np.stack(images), labels=np.asarray(labels),
                   class_names=list(spec.classes), split=split)


def gen_synthetic(spec: SyntheticSpec):
    """Deterministic (train, test) datasets on disjoint Philox streams."""
    train = _gen_split(spec, "train", spec.train_per_class, stream=1)
    test = _gen_split(spec, "test", spec.test_per_class, stream=2)
    stats = compute_stats(train.images)
    train.stats = stats
    test.stats = stats
    return train, test


# -- STL-10 binary format --------------------------------------------------------

def load_stl10(data_path, label_path=None):
    """Read STL-10 binary images (+ optional labels, remapped 1-10 -> 0-9).

    Each record is 27,648 bytes: R, G, B planes of 96x96, column-major.
    """
    raw = np.fromfile(data_path, dtype=np.uint8)
    if raw.size == 0 or raw.size % STL10_RECORD != 0:
        raise ValueError(
            f"{data_path}: size {raw.size} bytes is not a multiple of the "
            f"{STL10_RECORD}-byte record (remainder {raw.size % STL10_RECORD} "
            f"at offset {raw.size - raw.size % STL10_RECORD})")
    n = raw.size // STL10_RECORD
    planes = raw.reshape(n, 3, STL10_SIDE, STL10_SIDE)
    images = planes.transpose(0, 3, 2, 1)  # column-major planes -> (N,H,W,3)
    labels = None
    if label_path is not None:
        lab = np.fromfile(label_path, dtype=np.uint8)
        if lab.size != n:
            raise ValueError(
                f"{label_path}: {lab.size} labels for {n} images")
        if lab.min() < 1 or lab.max() > 10:
            raise ValueError(f"{label_path}: labels must be 1..10")
        labels = (lab.astype(np.int64) - 1)
    names = [f"class_{i}" for i in range(10)] if labels is not None else None
    return Dataset(images=np.ascontiguousarray(images), labels=labels,
                   class_names=names, split="train")


def write_stl10(images, data_path, labels=None, label_path=None):
    """Inverse of load_stl10, used to build bit-exact fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 4 or images.shape[1:] != (STL10_SIDE, STL10_SIDE, 3):
        raise ValueError(f"expected (N,96,96,3) images, got {images.shape}")
    planes = images.transpose(0, 3, 2, 1)  # back to column-major planes
    planes.astype(np.uint8).tofile(data_path)
    if labels is not None:
        (np.asarray(labels) + 1).astype(np.uint8).tofile(label_path)


# -- image-directory loader --------------------------------------------------------

def _load_png(path, resolution):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def load_image_dir(root, resolution=48, split="train"):
    """PNG directory loader: class subdirs (lexicographic labels) or flat."""
    root = os.fspath(root)
    subdirs = sorted(d for d in os.listdir(root)
                     if os.path.isdir(os.path.join(root, d)))
    images, labels = [], []
    skipped = 0
    if subdirs:
        for ci, sub in enumerate(subdirs):
            for fname in sorted(os.listdir(os.path.join(root, sub))):
                if not fname.lower().endswith(".png"):
                    continue
                path = os.path.join(root, sub, fname)
                try:
                    images.append(_load_png(path, resolution))
                    labels.append(ci)
                except Exception:
                    skipped += 1
                    print(f"warning: skipping unreadable image {path}")
        label_arr = np.asarray(labels)
        names = subdirs
    else:
        for fname in sorted(os.listdir(root)):
            if not fname.lower().endswith(".png"):
                continue
            path = os.path.join(root, fname)
            try:
                images.append(_load_png(path, resolution))
            except Exception:
                skipped += 1
                print(f"warning: skipping unreadable image {path}")
        label_arr = None
        names = None
    if not images:
        raise ValueError(f"{root}: no readable PNG images found "
                         f"({skipped} skipped)")
    return Dataset(images=np.stack(images), labels=label_arr,
                   class_names=names, split=split)


# -- normalization ---------------------------------------------------------------

def compute_stats(images):
    """Per-channel mean/std of pixel/255 over a (N,H,W,3) uint8 array."""
    scaled = images.reshape(-1, 3).astype(np.float64) / 255.0
    mean = scaled.mean(axis=0)
    std = scaled.std(axis=0)
    if not (np.isfinite(mean).all() and np.isfinite(std).all()):
        raise ValueError("non-finite normalization statistics")
    std = np.maximum(std, 1e-6)  # reject-by-floor for constant channels
    return NormStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def normalize_images(images, stats):
    """(N,H,W,3) uint8 -> (N,3,H,W) float32, (pixel/255 - mean)/std."""
    x = images.astype(np.float32) / 255.0
    x = (x - stats.mean) / stats.std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def denormalize_images(x, stats):
    """Inverse of normalize_images, back to pixel/255 units (NHWC)."""
    arr = np.asarray(x).transpose(0, 2, 3, 1)
    return arr * stats.std + stats.mean


def normalize_raster(raster, stats):
    """In-graph normalization of sketch rasters with the photo statistics.

    ``raster``: Tensor (B, H, W) in [0,1] -> Tensor (B, 3, H, W).
    """
    from . import autodiff as ad
    from .agents import sketch_to_rgb

    rgb = sketch_to_rgb(raster)
    inv_std = (1.0 / stats.std).astype(np.float32).reshape(3, 1, 1)
    offset = (stats.mean / stats.std).astype(np.float32).reshape(3, 1, 1)
    return rgb * ad.as_tensor(inv_std, like=rgb) - ad.as_tensor(offset, like=rgb)


def write_manifest(path, spec, train, test):
    manifest = {
        "classes": list(spec.classes),
        "resolution": spec.resolution,
        "counts": {"train": len(train), "test": len(test)},
        "seed": spec.seed,
        "stats": train.stats.to_json(),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
