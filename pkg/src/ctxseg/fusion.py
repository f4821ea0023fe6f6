"""Neighbor-context fusion: spatial attention from the target encoding onto its
eight encoded neighbors, summed and added back through a zero-initialized gate.

Shapes follow the single-target convention (``I_e`` is ``1 x C x H x W``,
``N_e`` is ``8 x C x H x W``). Every function also accepts one extra leading
batch axis, e.g. ``B x C x H x W`` targets with ``B x 8 x C x H x W`` neighbors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .patches import NeighborSet
from .tensor import Parameter, Tensor


class AlphaGate:
    """Learnable ``H x W`` field scaling the summed context; starts at exactly zero."""

    def __init__(self, height: int, width: int, dtype=np.float64):
        self.alpha = Parameter(np.zeros((height, width), dtype=dtype), name="fusion.alpha")

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class FusionState:
    I_e: Tensor
    N_e_cat: Tensor
    W_c: Tensor
    N_w: Tensor
    D_e: Tensor


def as_nchw(patches, dtype=np.float64) -> Tensor:
    """``S x S x ch`` (or ``N x S x S x ch``) pixel tiles as an ``N x ch x S x S`` tensor."""
    arr = np.asarray(patches, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected S x S x ch tiles, got shape {np.shape(patches)}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _check_geometry(encoder, size: int):
    if size % encoder.stride:
        raise ConfigurationError(f"encoder stride {encoder.stride} does not divide patch size {size}")


def encode_target(encoder, patch) -> Tensor:
    """Differentiable encoding of one tile (or a stack of tiles)."""
    x = as_nchw(patch, encoder.dtype)
    _check_geometry(encoder, x.shape[-1])
    return encoder(x)


def encode_neighbors(encoder, neighbors) -> Tensor:
    """Encode the eight neighbor tiles with the encoder parameters frozen.

    The result is value-identical to an unfrozen pass but carries no tape, so
    no gradient from this branch reaches the encoder.
    """
    tiles = neighbors.tiles if isinstance(neighbors, NeighborSet) else neighbors
    x = as_nchw(tiles, encoder.dtype)
    _check_geometry(encoder, x.shape[-1])
    with T.frozen(encoder.parameters()):
        out = encoder(x)
    return out


def attention_weights(i_e_flat: Tensor, n_e_cat: Tensor, temperature: float = 1.0) -> Tensor:
    """``W_c[k, j, i] = softmax_i(sum_c I_e[c, j] * N_e_cat[k, c, i])``.

    ``i_e_flat`` is ``1 x C x HW`` and ``n_e_cat`` is ``9 x C x HW``.
    """
    if i_e_flat.shape[-3] != 1 or i_e_flat.shape[-2:] != n_e_cat.shape[-2:]:
        raise DimensionError(f"attention needs [1,C,HW] and [9,C,HW], got {i_e_flat.shape} and {n_e_cat.shape}")
    logits = T.matmul_batched(T.swapaxes(i_e_flat, -1, -2), n_e_cat)
    return T.softmax_last_axis(logits, temperature)


def weighted_neighbors(n_e_cat: Tensor, w_c: Tensor, spatial: tuple[int, int]) -> Tensor:
    """``N_w[k, c, j] = sum_i N_e_cat[k, c, i] * W_c[k, j, i]``, reshaped to ``9 x C x H x W``."""
    H, W = spatial
    hw = n_e_cat.shape[-1]
    if H * W != hw or w_c.shape[-2:] != (hw, hw) or w_c.shape[:-2] != n_e_cat.shape[:-2]:
        raise DimensionError(f"weighted_neighbors got N_e_cat {n_e_cat.shape}, W_c {w_c.shape}, spatial {spatial}")
    n_w = T.matmul_batched(n_e_cat, T.swapaxes(w_c, -1, -2))
    return T.reshape(n_w, n_e_cat.shape[:-1] + (H, W))


def fuse(i_e: Tensor, n_w: Tensor, gate: AlphaGate) -> Tensor:
    """``D_e = I_e + alpha * sum_k N_w[k]``; alpha broadcasts over channels."""
    if gate.alpha.shape != i_e.shape[-2:]:
        raise ConfigurationError(f"alpha shape {gate.alpha.shape} does not match encoding {i_e.shape[-2:]}")
    if n_w.shape[-3:] != i_e.shape[-3:]:
        raise DimensionError(f"fuse got I_e {i_e.shape} and N_w {n_w.shape}")
    context = T.tsum(n_w, axis=-4)
    return T.add(i_e, T.mul(gate.alpha, context))


def context_fusion(i_e: Tensor, n_e: Tensor, gate: AlphaGate, temperature: float = 1.0,
                   detach_self: bool = False) -> FusionState:
    """Full fusion pass for ``I_e`` (``1 x C x H x W``) and ``N_e`` (``8 x C x H x W``).

    The target's own encoding is appended as slab 8. It stays differentiable
    unless ``detach_self`` is set.
    """
    if n_e.shape[-4] != 8 or n_e.shape[-3:] != i_e.shape[-3:]:
        raise DimensionError(f"context_fusion got I_e {i_e.shape} and N_e {n_e.shape}")
    C, H, W = i_e.shape[-3:]
    lead = n_e.shape[:-4]
    i_flat = T.reshape(i_e, lead + (1, C, H * W))
    own = T.detach(i_flat) if detach_self else i_flat
    n_e_cat = T.concat([T.reshape(n_e, lead + (8, C, H * W)), own], axis=-3)
    w_c = attention_weights(i_flat, n_e_cat, temperature)
    n_w = weighted_neighbors(n_e_cat, w_c, (H, W))
    d_e = fuse(i_e, n_w, gate)
    return FusionState(i_e, n_e_cat, w_c, n_w, d_e)


class EncodingCache:
    """Frozen neighbor encodings keyed by ``(image_id, row, col)``.

    Entries are valid only for the parameter version they were computed at;
    any optimizer step (``model.version`` change) empties the cache.
    """

    def __init__(self):
        self._store: dict = {}
        self._version: Optional[int] = None
        self.hits = 0
        self.misses = 0

    def clear(self):
        self._store.clear()

    def encodings(self, model, keys, tiles: np.ndarray) -> np.ndarray:
        """``keys[n]`` names ``tiles[n]``; returns encodings stacked in ``keys`` order."""
        if self._version != model.version:
            self._store.clear()
            self._version = model.version
        todo = []
        seen = set()
        for n, k in enumerate(keys):
            if k in self._store or k in seen:
                self.hits += 1
                continue
            seen.add(k)
            todo.append(n)
            self.misses += 1
        if todo:
            enc = encode_neighbors(model.encoder, tiles[todo]).data
            for n, e in zip(todo, enc):
                self._store[keys[n]] = e
        return np.stack([self._store[k] for k in keys])
