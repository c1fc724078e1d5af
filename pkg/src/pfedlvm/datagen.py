"""Synthetic non-i.i.d. segmentation scenes.

Each vehicle draws rectangles and discs whose classes follow its own class
frequency weights, and paints every class with its own vehicle-specific
colour.  Class 0 is the background fill.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# default three-vehicle split: 128 / 167 / 305 of 600 images
DEFAULT_PROPORTIONS = (128 / 600, 167 / 600, 305 / 600)

DEFAULT_CLASS_WEIGHTS = (
    (0.25, 0.45, 0.20, 0.10),
    (0.25, 0.10, 0.45, 0.20),
    (0.25, 0.20, 0.10, 0.45),
)


@dataclass
class SceneConfig:
    image_size: int = 16
    class_count: int = 4
    shapes_per_image: tuple[int, int] = (2, 5)
    class_weights: Sequence[Sequence[float]] = DEFAULT_CLASS_WEIGHTS
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2 (class 0 is background)")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid shapes_per_image range {self.shapes_per_image}")
        for v, w in enumerate(self.class_weights):
            w = np.asarray(w, dtype=float)
            if w.shape != (self.class_count,):
                raise ValueError(f"class_weights[{v}] must have {self.class_count} entries")
            if (w < 0).any() or not np.isclose(w.sum(), 1.0):
                raise ValueError(f"class_weights[{v}] must be non-negative and sum to 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def weights_for(self, vehicle_id: int) -> np.ndarray:
        if vehicle_id < len(self.class_weights):
            return np.asarray(self.class_weights[vehicle_id], dtype=float)
        # vehicles beyond the configured list get a seeded Dirichlet draw
        rng = np.random.default_rng([self.seed, vehicle_id, 0xD1])
        return rng.dirichlet(np.ones(self.class_count))


@dataclass
class LabeledImage:
    image: np.ndarray  # [3,H,W] in [0,1]
    mask: np.ndarray   # [H,W] int64 class indices


@dataclass(frozen=True)
class Shape:
    kind: str          # "rect" or "disc"
    cls: int
    y0: float
    x0: float
    y1: float = 0.0    # rect: exclusive corner; disc: unused
    x1: float = 0.0
    radius: float = 0.0

    def cover(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size]
        if self.kind == "rect":
            return (yy >= self.y0) & (yy < self.y1) & (xx >= self.x0) & (xx < self.x1)
        cy, cx = yy + 0.5, xx + 0.5
        return (cy - self.y0) ** 2 + (cx - self.x0) ** 2 <= self.radius ** 2


def vehicle_palette(seed: int, vehicle_id: int, class_count: int) -> np.ndarray:
    """[C,3] base RGB colour per class for one vehicle."""
    rng = np.random.default_rng([seed, vehicle_id, 0xC0])
    return rng.uniform(0.0, 1.0, size=(class_count, 3))


def render(shapes: Sequence[Shape], palette: np.ndarray, size: int, noise_std: float,
           rng: np.random.Generator | None = None) -> LabeledImage:
    """Paint shapes in order over a class-0 background; later shapes occlude earlier ones."""
    mask = np.zeros((size, size), dtype=np.int64)
    for s in shapes:
        mask[s.cover(size)] = s.cls
    image = palette[mask].transpose(2, 0, 1).astype(np.float64)
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise_std > 0 needs a random generator")
        image = image + rng.normal(0.0, noise_std, size=image.shape)
    return LabeledImage(np.clip(image, 0.0, 1.0), mask)


def _random_shape(rng: np.random.Generator, size: int, cls: int, rect: bool) -> Shape:
    if rect:
        h = rng.integers(size // 4, size // 2 + 1)
        w = rng.integers(size // 4, size // 2 + 1)
        y0 = rng.integers(0, size - h + 1)
        x0 = rng.integers(0, size - w + 1)
        return Shape("rect", cls, float(y0), float(x0), float(y0 + h), float(x0 + w))
    r = rng.uniform(size / 8, size / 4)
    cy, cx = rng.uniform(0, size, size=2)
    return Shape("disc", cls, float(cy), float(cx), radius=float(r))


def generate_vehicle_dataset(cfg: SceneConfig, vehicle_id: int, count: int) -> list[LabeledImage]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([cfg.seed, vehicle_id, 0xDA])
    palette = vehicle_palette(cfg.seed, vehicle_id, cfg.class_count)
    weights = cfg.weights_for(vehicle_id)
    lo, hi = cfg.shapes_per_image
    per_image = rng.integers(lo, hi + 1, size=count)
    classes = stratified_classes(rng, weights, int(per_image.sum()))
    # rectangles and discs alternate within each class so no class is left
    # with a run of the larger shape kind
    seen = rng.integers(0, 2, size=cfg.class_count)
    rect = np.empty(classes.size, dtype=bool)
    for i, c in enumerate(classes):
        rect[i] = seen[c] % 2 == 0
        seen[c] += 1
    out, start = [], 0
    for n in per_image:
        shapes = [_random_shape(rng, cfg.image_size, int(classes[i]), bool(rect[i]))
                  for i in range(start, start + n)]
        start += n
        out.append(render(shapes, palette, cfg.image_size, cfg.noise_std, rng))
    return out


def stratified_classes(rng: np.random.Generator, weights: np.ndarray, total: int) -> np.ndarray:
    """``total`` class draws whose counts stay within two of ``total * weights``.

    One uniform per stratum ``[i/total, (i+1)/total)`` goes through the inverse
    CDF, then the result is shuffled.  Each draw still has marginal ``weights``,
    but the per-class counts lose the multinomial spread that would otherwise
    dominate the pixel histogram of a few hundred images.
    """
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    u = (np.arange(total) + rng.random(total)) / total
    cdf = np.cumsum(weights)
    last = int(np.flatnonzero(weights > 0)[-1])
    picked = np.minimum(np.searchsorted(cdf, u, side="right"), last)
    return rng.permutation(picked)


def partition_counts(total: int, proportions: Sequence[float]) -> list[int]:
    """Split ``total`` by ``proportions`` with largest-remainder rounding."""
    if len(proportions) == 0:
        raise ValueError("proportions must not be empty")
    p = np.asarray(proportions, dtype=float)
    if (p < 0).any() or not np.isclose(p.sum(), 1.0):
        raise ValueError("proportions must be non-negative and sum to 1")
    exact = total * p
    counts = np.floor(exact + 1e-9).astype(int)
    remainders = exact - counts
    short = total - int(counts.sum())
    # ties go to the lower index
    for i in np.argsort(-remainders, kind="stable")[:short]:
        counts[i] += 1
    return [int(c) for c in counts]


def class_histogram(images: Sequence[LabeledImage], class_count: int) -> np.ndarray:
    counts = np.zeros(class_count, dtype=np.int64)
    for im in images:
        counts += np.bincount(im.mask.ravel(), minlength=class_count)
    return counts


def stack(images: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([im.image for im in images]),
            np.stack([im.mask for im in images]))


DATASET_MAGIC = b"PFDS"


def dump_dataset(images: Sequence[LabeledImage], path: str | Path, vehicle_id: int) -> None:
    """Header (magic, version, vehicle, count, H, W) + float64 LE images + float64 LE masks."""
    imgs, masks = stack(images)
    n, _, h, w = imgs.shape
    header = DATASET_MAGIC + struct.pack("<BIIII", 1, vehicle_id, n, h, w)
    Path(path).write_bytes(header + imgs.astype("<f8").tobytes() + masks.astype("<f8").tobytes())


def load_dataset(path: str | Path) -> tuple[int, list[LabeledImage]]:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset dump")
    _, vid, n, h, w = struct.unpack_from("<BIIII", raw, 4)
    off = 4 + 17
    imgs = np.frombuffer(raw, "<f8", n * 3 * h * w, off).reshape(n, 3, h, w)
    off += 8 * n * 3 * h * w
    masks = np.frombuffer(raw, "<f8", n * h * w, off).reshape(n, h, w).astype(np.int64)
    return vid, [LabeledImage(imgs[i].astype(np.float64), masks[i]) for i in range(n)]
