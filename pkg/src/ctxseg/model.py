"""Encoder / fusion / decoder segmenter."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .fusion import AlphaGate, EncodingCache, as_nchw, context_fusion, encode_neighbors
from .patches import NeighborSet, neighbor_index, stitch, tile_image
from .tensor import Parameter, Tensor

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    patch_size: int = 32
    in_channels: int = 3
    encoder_channels: tuple = (8, 16, 16)
    encoder_strides: tuple = (2, 2, 1)
    num_classes: int = 3
    context_enabled: bool = True
    temperature: float = 1.0
    detach_self_slab: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)

    @property
    def stride(self) -> int:
        return math.prod(self.encoder_strides)

    @property
    def feature_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def encoded_size(self) -> int:
        return self.patch_size // self.stride

    def validate(self) -> "ModelConfig":
        problems = []
        if self.patch_size < 1:
            problems.append("patch_size must be >= 1")
        if not self.encoder_channels or len(self.encoder_channels) != len(self.encoder_strides):
            problems.append("encoder_channels and encoder_strides must be nonempty and the same length")
        if any(c < 1 for c in self.encoder_channels):
            problems.append("channel widths must be positive")
        if any(s not in (1, 2) for s in self.encoder_strides):
            problems.append("per-stage encoder strides must be 1 or 2")
        if self.encoder_strides and self.patch_size % self.stride:
            problems.append(f"encoder stride {self.stride} must divide patch_size {self.patch_size}")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.in_channels < 1:
            problems.append("in_channels must be >= 1")
        if self.temperature <= 0:
            problems.append("temperature must be > 0")
        if self.dtype not in DTYPES:
            problems.append(f"dtype must be one of {sorted(DTYPES)}")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["encoder_strides"] = list(self.encoder_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Conv:
    def __init__(self, name, cin, cout, k, stride, rng, dtype):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")
        self.k, self.stride = k, stride

    def __call__(self, x: Tensor) -> Tensor:
        if self.stride == 1:
            return T.conv2d(x, self.weight, self.bias, 1, (self.k - 1) // 2)
        # window origins at -1, -1+s, ...: one leading row/col of zeros, none trailing
        x = T.pad2d(x, (self.k - 1) // 2, 0)
        return T.conv2d(x, self.weight, self.bias, self.stride, 0)

    def parameters(self):
        return [self.weight, self.bias]


class Encoder:
    def __init__(self, cfg: ModelConfig, rng):
        self.dtype = DTYPES[cfg.dtype]
        self.stride = cfg.stride
        self.convs = []
        cin = cfg.in_channels
        for i, (c, s) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides)):
            self.convs.append(Conv(f"encoder.{i}", cin, c, 3, s, rng, self.dtype))
            cin = c

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return x

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]


class Decoder:
    """Nearest upsample + 3x3 conv per strided encoder stage, then a 1x1 class head."""

    def __init__(self, cfg: ModelConfig, rng):
        dtype = DTYPES[cfg.dtype]
        factors = [s for s in reversed(cfg.encoder_strides) if s > 1]
        widths = list(reversed(cfg.encoder_channels[:-1]))
        widths += [cfg.encoder_channels[0]] * (len(factors) - len(widths))
        self.stages = []
        cin = cfg.feature_channels
        for i, (f, w) in enumerate(zip(factors, widths)):
            self.stages.append((f, Conv(f"decoder.{i}", cin, w, 3, 1, rng, dtype)))
            cin = w
        self.head = Conv("head", cin, cfg.num_classes, 1, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for f, conv in self.stages:
            x = T.relu(conv(T.upsample_nearest(x, f)))
        return self.head(x)

    def parameters(self):
        return [p for _, c in self.stages for p in c.parameters()] + self.head.parameters()


class Segmenter:
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        h = cfg.encoded_size
        self.gate = AlphaGate(h, h, DTYPES[cfg.dtype]) if cfg.context_enabled else None
        # bumped on every parameter update; invalidates cached neighbor encodings
        self.version = 0

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    def parameters(self) -> list[Parameter]:
        ps = self.encoder.parameters() + self.decoder.parameters()
        if self.gate is not None:
            ps.append(self.gate.alpha)
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, arrays: dict):
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing, extra = set(params) - set(arrays), set(arrays) - set(params)
            raise DimensionError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        self.version += 1


def build_model(config: ModelConfig) -> Segmenter:
    return Segmenter(config.validate())


def _use_context(model: Segmenter, context_on: Optional[bool]) -> bool:
    if context_on is None:
        context_on = model.config.context_enabled
    if context_on and model.gate is None:
        raise UsageError("model was built with context disabled; it has no fusion gate")
    return bool(context_on)


def forward_batch(model: Segmenter, patches, neighbor_encodings: Optional[Tensor] = None,
                  context_on: Optional[bool] = None) -> Tensor:
    """Logits ``B x K x S x S`` for ``B`` target tiles.

    ``neighbor_encodings`` (``B x 8 x C x H x W``, constant) is required only
    when context is on.
    """
    cfg = model.config
    x = as_nchw(patches, model.dtype)
    if x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.patch_size, cfg.patch_size):
        raise UsageError(f"tiles {x.shape} do not match config (ch={cfg.in_channels}, S={cfg.patch_size})")
    i_e = model.encoder(x)
    if _use_context(model, context_on):
        if neighbor_encodings is None:
            raise UsageError("context is on but no neighbor encodings were given")
        d_e = context_fusion(i_e, neighbor_encodings, model.gate, cfg.temperature, cfg.detach_self_slab).D_e
    else:
        d_e = i_e
    return model.decoder(d_e)


def forward(model: Segmenter, patch, neighbors: Optional[NeighborSet], context_on: Optional[bool] = None) -> Tensor:
    """Logits ``1 x K x S x S`` for one target tile and its neighbor set."""
    if not _use_context(model, context_on):
        return forward_batch(model, patch, None, False)
    tiles = np.asarray(neighbors.tiles)
    patch = np.asarray(patch)
    if patch.ndim == 2:
        patch = patch[:, :, None]
    if tiles.ndim == 3:
        tiles = tiles[..., None]
    if tiles.shape != (8,) + patch.shape:
        raise UsageError(f"neighbor tiles {tiles.shape} do not match patch {patch.shape}")
    n_e = encode_neighbors(model.encoder, tiles)
    return forward_batch(model, patch, T.reshape(n_e, (1,) + n_e.shape), True)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Class index per pixel over axis 1; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)


def image_neighbor_encodings(model: Segmenter, grid, image_id=0, cache: Optional[EncodingCache] = None) -> np.ndarray:
    """Frozen encodings ``[rows*cols, 8, C, H, W]`` of every tile's neighbor set."""
    tiles = grid.flat()
    tiles = np.concatenate([tiles, np.zeros((1,) + tiles.shape[1:], tiles.dtype)])
    n = grid.rows * grid.cols
    keys = [(image_id, i // grid.cols, i % grid.cols) for i in range(n)] + [("zero",)]
    if cache is not None:
        enc = cache.encodings(model, keys, tiles)
    else:
        enc = encode_neighbors(model.encoder, tiles).data
    return enc[neighbor_index(grid.rows, grid.cols)]


def predict_full_image(model: Segmenter, image: np.ndarray, context_on: Optional[bool] = None,
                       batch_size: int = 64, cache: Optional[EncodingCache] = None, image_id=0) -> np.ndarray:
    """Per-pixel labels for a full image: tile, segment each tile with its neighbors, stitch, crop."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    ctx = _use_context(model, context_on)
    grid = tile_image(image, model.config.patch_size)
    tiles = grid.flat()
    n = len(tiles)
    neigh = image_neighbor_encodings(model, grid, image_id, cache) if ctx else None
    labels = np.empty((n, grid.patch_size, grid.patch_size), dtype=np.int64)
    with T.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            ne = Tensor(neigh[sl]) if ctx else None
            logits = forward_batch(model, tiles[sl], ne, ctx).data
            labels[sl] = argmax_labels(logits)
    return stitch(labels.reshape(grid.rows, grid.cols, grid.patch_size, grid.patch_size), grid)
