"""Synthetic scenes: colored disks, rectangles and triangles on a noisy
background, with category = shape type and occlusion-disjoint masks."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import ConfigError, DataError, UsageError

DATASET_MAGIC = b"TSDS"
DATASET_VERSION = 1

CATEGORY_NAMES = {1: "disk", 2: "rectangle", 3: "triangle"}
NUM_SHAPE_TYPES = 3
MIN_MASK_PIXELS = 16
_PLACEMENT_RETRIES = 64


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    masks: np.ndarray  # [K, H, W] uint8, pairwise disjoint
    categories: np.ndarray  # [K] int64 in 1..3
    centroids: np.ndarray  # [K, 2] float64, (cy, cx)
    seed: int

    def instances(self) -> list[tuple[np.ndarray, int, tuple[float, float]]]:
        return [
            (self.masks[k], int(self.categories[k]), (float(self.centroids[k, 0]), float(self.centroids[k, 1])))
            for k in range(len(self.masks))
        ]


def _disk_mask(h, w, rng) -> np.ndarray:
    r = rng.uniform(10, 28)
    cy = rng.uniform(r, h - r)
    cx = rng.uniform(r, w - r)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)


def _rectangle_mask(h, w, rng) -> np.ndarray:
    rh = rng.uniform(16, 52)
    rw = rng.uniform(16, 52)
    y0 = rng.uniform(1, h - rh - 1)
    x0 = rng.uniform(1, w - rw - 1)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[int(y0) : int(y0 + rh), int(x0) : int(x0 + rw)] = 1
    return mask


def _triangle_mask(h, w, rng) -> np.ndarray:
    size = rng.uniform(26, 60)
    cy = rng.uniform(size / 2 + 1, h - size / 2 - 1)
    cx = rng.uniform(size / 2 + 1, w - size / 2 - 1)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
    radii = rng.uniform(0.6, 1.0, size=3) * size / 2
    pts = np.stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % 3]
        y2, x2 = pts[(i + 2) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        ref = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if ref == 0:  # collinear vertices; reject so the caller retries
            return np.zeros((h, w), dtype=np.uint8)
        inside &= (cross * ref) >= 0
    return inside.astype(np.uint8)


_SHAPE_MAKERS = {1: _disk_mask, 2: _rectangle_mask, 3: _triangle_mask}


def _try_sample(h: int, w: int, max_objects: int, rng: np.random.Generator, seed: int) -> SceneSample | None:
    base = rng.uniform(0.4, 0.6, size=3)
    slope = rng.uniform(-0.05, 0.05, size=(3, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    image = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        image[ch] = base[ch] + slope[ch, 0] * yy / h + slope[ch, 1] * xx / w

    count = int(rng.integers(1, max_objects + 1))
    shapes, categories = [], []
    for _ in range(count):
        cat = int(rng.integers(1, NUM_SHAPE_TYPES + 1))
        shape = _SHAPE_MAKERS[cat](h, w, rng)
        # each category owns a hue family (with in-family variation) so the
        # desk-scale budget suffices for classification; masks still require
        # per-pixel instance separation
        color = rng.uniform(0.05, 0.35, size=3)
        color[cat - 1] = rng.uniform(0.75, 1.0)
        shapes.append((shape, color))
        categories.append(cat)

    # later shapes occlude earlier ones; visible masks stay disjoint
    visible = []
    occluder = np.zeros((h, w), dtype=bool)
    for shape, _ in reversed(shapes):
        vis = shape.astype(bool) & ~occluder
        occluder |= shape.astype(bool)
        visible.append(vis)
    visible = visible[::-1]

    keep_masks, keep_cats, keep_centroids = [], [], []
    for vis, cat, (shape, color) in zip(visible, categories, shapes):
        if vis.sum() < MIN_MASK_PIXELS or vis.sum() < 0.4 * shape.sum():
            return None  # too occluded; retry with a new sub-seed
        image[:, shape.astype(bool)] = color[:, None]
        ys, xs = np.nonzero(vis)
        keep_masks.append(vis.astype(np.uint8))
        keep_cats.append(cat)
        keep_centroids.append((float(ys.mean()), float(xs.mean())))

    image += rng.normal(0, 0.02, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(
        image=image.astype(np.float32),
        masks=np.stack(keep_masks),
        categories=np.asarray(keep_cats, dtype=np.int64),
        centroids=np.asarray(keep_centroids, dtype=np.float64),
        seed=seed,
    )


def generate_sample(h: int, w: int, max_objects: int, classes: int, seed, index: int = 0) -> SceneSample:
    if classes != NUM_SHAPE_TYPES:
        raise ConfigError(f"the shape generator defines exactly {NUM_SHAPE_TYPES} categories, got classes={classes}")
    if max_objects < 1:
        raise ConfigError("max_objects must be >= 1")
    for sub_seed in range(_PLACEMENT_RETRIES):
        rng = np.random.default_rng([seed, index, sub_seed])
        sample = _try_sample(h, w, max_objects, rng, seed)
        if sample is not None:
            return sample
    raise DataError(f"no feasible scene after {_PLACEMENT_RETRIES} retries (seed={seed}, index={index})")


def generate_dataset(count: int, h: int, w: int, max_objects: int, classes: int, seed: int) -> list[SceneSample]:
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    return [generate_sample(h, w, max_objects, classes, seed, index=i) for i in range(count)]


# -- dataset file io ------------------------------------------------------------

def save_dataset(path: str, samples: list[SceneSample]) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(samples)))
        for s in samples:
            tensorio.write_tensor(fh, s.image)
            tensorio.write_tensor(fh, s.masks)
            tensorio.write_tensor(fh, s.categories)
            tensorio.write_tensor(fh, s.centroids)
            tensorio.write_tensor(fh, np.asarray(s.seed, dtype=np.int64))


def load_dataset(path: str) -> list[SceneSample]:
    samples = []
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise UsageError(f"not a dataset file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != DATASET_VERSION:
            raise UsageError(f"unsupported dataset version {version}")
        for _ in range(count):
            image = tensorio.read_tensor(fh)
            masks = tensorio.read_tensor(fh)
            categories = tensorio.read_tensor(fh)
            centroids = tensorio.read_tensor(fh)
            seed = int(tensorio.read_tensor(fh))
            samples.append(SceneSample(image=image, masks=masks, categories=categories,
                                       centroids=centroids, seed=seed))
    return samples
