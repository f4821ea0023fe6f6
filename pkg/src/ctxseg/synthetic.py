"""Seeded segmentation task whose patch-border labels need neighbor context.

Every patch gets an independent uniformly drawn dominant color class and is
painted that color (plus Gaussian noise). In patches with all eight
neighbors present, the ring of width ``context_radius`` along the patch
border is repainted neutral gray noise, independent of any class, and
labeled with the majority dominant class among the eight neighbors. A tile
viewed alone therefore says nothing about its band labels, while the
neighbor set determines them.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .patches import NEIGHBOR_OFFSETS

BAND_GRAY = 0.5


@dataclass
class SyntheticTaskConfig:
    image_size: int = 256
    patch_size: int = 32
    num_classes: int = 3
    context_radius: int = 4
    noise: float = 0.05
    seed: int = 0
    num_images: int = 40

    def validate(self) -> "SyntheticTaskConfig":
        problems = []
        if self.patch_size < 1 or self.image_size < self.patch_size:
            problems.append("need 1 <= patch_size <= image_size")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if not 0 <= self.context_radius < self.patch_size:
            problems.append("context_radius must satisfy 0 <= context_radius < patch_size")
        if 2 * self.context_radius >= self.patch_size and self.context_radius:
            problems.append("context_radius must leave a colored patch interior (2*radius < patch_size)")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if self.num_images < 1:
            problems.append("num_images must be >= 1")
        if problems:
            raise ConfigurationError("invalid synthetic task config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def palette(num_classes: int) -> np.ndarray:
    """``K x 3`` saturated RGB colors with evenly spaced hues, far from the band gray."""
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.85, 0.9) for k in range(num_classes)])


def majority_class(classes: Sequence[int], num_classes: int) -> int:
    """Most frequent class; a tie goes to the tied class whose cyclic successor gap is smallest.

    For K=3 and 8 votes only two-way ties occur, and the rule picks ``t`` when
    ``t+1 (mod K)`` is the other tied class. It commutes with cyclic relabeling,
    so uniform iid votes give a uniform label. Remaining ambiguities (K>3)
    fall back to the lowest index.
    """
    counts = np.bincount(np.asarray(classes, dtype=np.int64), minlength=num_classes)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    gaps = [((tied[(i + 1) % len(tied)] - t) % num_classes) or num_classes for i, t in enumerate(tied)]
    return int(tied[int(np.argmin(gaps))])


def grid_shape(config: SyntheticTaskConfig) -> tuple[int, int]:
    n = -(-config.image_size // config.patch_size)
    return n, n


def band_mask(config: SyntheticTaskConfig) -> np.ndarray:
    """Boolean raster of pixels whose label comes from neighbor context."""
    H = W = config.image_size
    S, r = config.patch_size, config.context_radius
    mask = np.zeros((H, W), dtype=bool)
    if r == 0:
        return mask
    rows, cols = grid_shape(config)
    for pr in range(1, rows - 1):
        for pc in range(1, cols - 1):
            y0, x0 = pr * S, pc * S
            if y0 + S > H or x0 + S > W:
                continue
            ring = np.ones((S, S), dtype=bool)
            ring[r:S - r, r:S - r] = False
            mask[y0:y0 + S, x0:x0 + S] = ring
    return mask


def patch_classes(config: SyntheticTaskConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, config.num_classes, grid_shape(config))


def generate(config: SyntheticTaskConfig, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(image H x W x 3 in [0,1], labels H x W)`` for image ``index`` of the seeded task."""
    config.validate()
    rng = np.random.default_rng([config.seed, index])
    H = W = config.image_size
    S, K = config.patch_size, config.num_classes
    cls = patch_classes(config, rng)
    rows, cols = cls.shape
    colors = palette(K)

    labels = np.repeat(np.repeat(cls, S, axis=0), S, axis=1)[:H, :W].copy()
    image = colors[labels]
    band = band_mask(config)
    if band.any():
        for pr in range(1, rows - 1):
            for pc in range(1, cols - 1):
                votes = [cls[pr + dr, pc + dc] for dr, dc in NEIGHBOR_OFFSETS]
                y0, x0 = pr * S, pc * S
                sl = (slice(y0, y0 + S), slice(x0, x0 + S))
                labels[sl] = np.where(band[sl], majority_class(votes, K), labels[sl])
        image[band] = BAND_GRAY
    if config.noise:
        image = image + rng.normal(0.0, config.noise, image.shape)
    return np.clip(image, 0.0, 1.0), labels.astype(np.int64)


def generate_dataset(config: SyntheticTaskConfig) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return [(f"img{i:04d}", *generate(config, i)) for i in range(config.num_images)]


def split(items: Sequence, fractions: Sequence[float], seed: int = 0) -> list[list]:
    """Deterministic disjoint partition of ``items`` by ``fractions`` (which must sum to 1)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or len(fr) == 0 or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0, atol=1e-9):
        raise ConfigurationError(f"split fractions must be nonnegative and sum to 1, got {list(fractions)}")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    # largest-remainder rounding so sizes sum to n exactly
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [[items[j] for j in sorted(order[bounds[i]:bounds[i + 1]])] for i in range(len(fr))]


def write_dataset(root, config: SyntheticTaskConfig, fractions=(0.8, 0.2, 0.0),
                  names=("train", "val", "test")) -> dict[str, list[str]]:
    """Write ``root/<part>/{images,labels}`` PNG pairs plus ``root/task.json``."""
    from .imageio import write_image, write_labels

    root = Path(root)
    data = generate_dataset(config)
    parts = split(list(range(len(data))), fractions, config.seed)
    written = {}
    for name, idx in zip(names, parts):
        (root / name / "images").mkdir(parents=True, exist_ok=True)
        (root / name / "labels").mkdir(parents=True, exist_ok=True)
        written[name] = []
        for i in idx:
            stem, img, lab = data[i]
            write_image(root / name / "images" / f"{stem}.png", img)
            write_labels(root / name / "labels" / f"{stem}.png", lab)
            written[name].append(stem)
    meta = {"task": config.to_dict(), "fractions": list(fractions), "parts": written}
    (root / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return written
