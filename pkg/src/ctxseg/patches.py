"""Non-overlapping tiling, eight-neighborhoods and stitching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError

# row-major around the target; consistent between training and inference
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
NEIGHBOR_NAMES = ("NW", "N", "NE", "W", "E", "SW", "S", "SE")


@dataclass
class PatchGrid:
    """Image split into ``rows x cols`` tiles of ``S x S`` (plus any trailing channel axes)."""

    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # [rows, cols, S, S, ...]
    pad_bottom: int
    pad_right: int
    original_height: int
    original_width: int

    @property
    def tile_shape(self):
        return self.patches.shape[2:]

    def tile(self, row: int, col: int) -> np.ndarray:
        return self.patches[row, col]

    def flat(self) -> np.ndarray:
        return self.patches.reshape((self.rows * self.cols,) + self.tile_shape)

    def geometry(self) -> dict:
        return dict(patch_size=self.patch_size, rows=self.rows, cols=self.cols, pad_bottom=self.pad_bottom,
                    pad_right=self.pad_right, original_height=self.original_height,
                    original_width=self.original_width)


@dataclass
class NeighborSet:
    tiles: np.ndarray  # [8, S, S, ...] in NEIGHBOR_NAMES order
    synthetic: tuple

    @property
    def num_synthetic(self) -> int:
        return sum(self.synthetic)


def tile_image(image: np.ndarray, patch_size: int, pad_value=0) -> PatchGrid:
    """Zero-pad ``image`` (H x W or H x W x C) up to multiples of ``patch_size`` and tile it.

    Label rasters should pass their ignore label as ``pad_value``.
    """
    image = np.asarray(image)
    if patch_size < 1:
        raise UsageError(f"patch size must be >= 1, got {patch_size}")
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise UsageError(f"image must be a nonempty H x W[ x C] raster, got shape {image.shape}")
    H, W = image.shape[:2]
    S = patch_size
    rows, cols = -(-H // S), -(-W // S)
    pb, pr = rows * S - H, cols * S - W
    if pb or pr:
        pad = [(0, pb), (0, pr)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad, constant_values=pad_value)
    rest = image.shape[2:]
    patches = image.reshape((rows, S, cols, S) + rest).swapaxes(1, 2).copy()
    return PatchGrid(S, rows, cols, patches, pb, pr, H, W)


def neighbor_patches(grid: PatchGrid, row: int, col: int) -> NeighborSet:
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise UsageError(f"patch ({row}, {col}) outside a {grid.rows} x {grid.cols} grid")
    tiles = np.zeros((8,) + grid.tile_shape, dtype=grid.patches.dtype)
    synthetic = []
    for k, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        r, c = row + dr, col + dc
        if 0 <= r < grid.rows and 0 <= c < grid.cols:
            tiles[k] = grid.patches[r, c]
            synthetic.append(False)
        else:
            synthetic.append(True)
    return NeighborSet(tiles, tuple(synthetic))


def neighbor_index(rows: int, cols: int) -> np.ndarray:
    """``[rows*cols, 8]`` flat tile index of each neighbor; ``rows*cols`` marks a zero tile."""
    idx = np.full((rows * cols, 8), rows * cols, dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            for k, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    idx[r * cols + c, k] = rr * cols + cc
    return idx


def stitch(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`tile_image`: assemble ``[rows, cols, S, S, ...]`` and crop the padding."""
    patches = np.asarray(patches)
    S = grid.patch_size
    if patches.shape[:4] != (grid.rows, grid.cols, S, S):
        raise DimensionError(
            f"patch array {patches.shape} does not match grid {grid.rows} x {grid.cols} of {S} x {S}")
    rest = patches.shape[4:]
    full = patches.swapaxes(1, 2).reshape((grid.rows * S, grid.cols * S) + rest)
    return full[:grid.original_height, :grid.original_width].copy()
