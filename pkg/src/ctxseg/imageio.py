"""PNG / binary PGM / PPM rasters and the images/ + labels/ dataset layout."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


def read_image(path) -> np.ndarray:
    """8-bit grayscale or RGB image as float ``H x W x C`` normalized to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit samples, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def read_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: label raster must be single-channel, got mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def write_image(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def list_pairs(root) -> list[tuple[str, Path, Path]]:
    """Matching ``(stem, image_path, label_path)`` under ``root/images`` and ``root/labels``."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and labels/ directories")
    labels = {p.stem: p for p in lab_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    pairs = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in labels:
            raise DataError(f"no label raster for image {p.name}")
        pairs.append((p.stem, p, labels[p.stem]))
    return pairs


def load_dataset(root) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return [(stem, read_image(ip), read_labels(lp)) for stem, ip, lp in list_pairs(root)]
