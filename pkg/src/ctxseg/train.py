"""Training loop, patch dataset and model checkpoints."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence, TextIO

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigurationError, UsageError
from .fusion import EncodingCache, encode_neighbors
from .metrics import ConfusionMatrix
from .model import ModelConfig, Segmenter, build_model, forward_batch, predict_full_image
from .optim import AdamState, adam_step
from .patches import NEIGHBOR_OFFSETS, tile_image
from .tensor import Tensor

PAD_LABEL = -1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    ignore_label: Optional[int] = None
    background_class: Optional[int] = None
    loss_includes_background: bool = True
    use_cache: bool = True
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lr >= 0:
            problems.append("lr must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.loss_includes_background and self.background_class is None:
            problems.append("loss_includes_background=false needs background_class")
        if problems:
            raise ConfigurationError("invalid train config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    patches: np.ndarray          # B x S x S x ch
    labels: np.ndarray           # B x S x S
    neighbor_tiles: np.ndarray   # B x 8 x S x S x ch
    neighbor_keys: list          # B*8 cache keys, row-major
    keys: list                   # B (image, row, col)


class PatchDataset:
    """Every tile of every image as a (patch, neighbors, label tile) sample."""

    def __init__(self, items: Sequence[tuple], patch_size: int, ignore_label: Optional[int] = None):
        if not items:
            raise UsageError("dataset is empty")
        self.patch_size = patch_size
        self.pad_label = PAD_LABEL if ignore_label is None else ignore_label
        self.grids, self.label_grids, self.stems = [], [], []
        for stem, image, labels in items:
            image = np.asarray(image, dtype=np.float64)
            if image.ndim == 2:
                image = image[:, :, None]
            self.stems.append(stem)
            self.grids.append(tile_image(image, patch_size))
            self.label_grids.append(tile_image(np.asarray(labels, dtype=np.int64), patch_size, self.pad_label))
        self.samples = [(i, r, c) for i, g in enumerate(self.grids) for r in range(g.rows) for c in range(g.cols)]
        self._zero = np.zeros(self.grids[0].tile_shape)

    def __len__(self):
        return len(self.samples)

    def neighbor_key(self, i, r, c):
        g = self.grids[i]
        return (i, r, c) if 0 <= r < g.rows and 0 <= c < g.cols else ("zero",)

    def tile_for(self, key):
        return self._zero if key == ("zero",) else self.grids[key[0]].tile(key[1], key[2])

    def batch(self, sample_ids: Sequence[int]) -> Batch:
        keys = [self.samples[s] for s in sample_ids]
        nkeys = [self.neighbor_key(i, r + dr, c + dc) for i, r, c in keys for dr, dc in NEIGHBOR_OFFSETS]
        tiles = np.stack([self.tile_for(k) for k in nkeys])
        return Batch(
            patches=np.stack([self.grids[i].tile(r, c) for i, r, c in keys]),
            labels=np.stack([self.label_grids[i].tile(r, c) for i, r, c in keys]),
            neighbor_tiles=tiles.reshape((len(keys), 8) + tiles.shape[1:]),
            neighbor_keys=nkeys,
            keys=keys,
        )

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        order = rng.permutation(len(self.samples)) if rng is not None else np.arange(len(self.samples))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    step_losses: list = field(default_factory=list)
    class_pixels: list = field(default_factory=list)


def batch_neighbor_encodings(model: Segmenter, batch: Batch, cache: Optional[EncodingCache]) -> Tensor:
    B = len(batch.keys)
    flat = batch.neighbor_tiles.reshape((B * 8,) + batch.neighbor_tiles.shape[2:])
    if cache is not None:
        enc = cache.encodings(model, batch.neighbor_keys, flat)
    else:
        enc = encode_neighbors(model.encoder, flat).data
    return Tensor(enc.reshape((B, 8) + enc.shape[1:]))


def batch_loss(model: Segmenter, batch: Batch, cfg: TrainConfig, pad_label: int,
               cache: Optional[EncodingCache] = None) -> Tensor:
    ctx = model.config.context_enabled
    neigh = batch_neighbor_encodings(model, batch, cache) if ctx else None
    logits = forward_batch(model, batch.patches, neigh, ctx)
    labels = batch.labels
    if not cfg.loss_includes_background:
        labels = np.where(labels == cfg.background_class, pad_label, labels)
    return T.cross_entropy(logits, labels, ignore_label=pad_label)


def train_epoch(model: Segmenter, dataset: PatchDataset, cfg: TrainConfig, state: AdamState, epoch: int = 0,
                cache: Optional[EncodingCache] = None, log: Optional[TextIO] = None) -> EpochStats:
    """One pass over ``dataset``: one Adam step per batch of ``cfg.batch_size`` target tiles."""
    if len(dataset) == 0:
        raise UsageError("dataset is empty")
    rng = np.random.default_rng([cfg.seed, epoch])
    params = model.parameters()
    K = model.config.num_classes
    pixels = np.zeros(K, dtype=np.int64)
    losses = []
    for step, batch in enumerate(dataset.batches(cfg.batch_size, rng)):
        model.zero_grad()
        loss = batch_loss(model, batch, cfg, dataset.pad_label, cache)
        T.backward(loss)
        adam_step(params, [p.grad for p in params], state)
        model.version += 1
        lv = float(loss.data)
        losses.append(lv)
        valid = batch.labels[(batch.labels >= 0) & (batch.labels < K)]
        pixels += np.bincount(valid, minlength=K)
        if log is not None:
            log.write(f"{epoch} {step} {lv!r}\n")
    return EpochStats(epoch, float(np.mean(losses)), losses, pixels.tolist())


def fit(model: Segmenter, dataset: PatchDataset, cfg: TrainConfig, log: Optional[TextIO] = None,
        state: Optional[AdamState] = None) -> tuple[AdamState, list[EpochStats]]:
    cfg.validate()
    params = model.parameters()
    state = state or AdamState.for_params(params, lr=cfg.lr)
    cache = EncodingCache() if cfg.use_cache else None
    history = []
    for epoch in range(cfg.epochs):
        history.append(train_epoch(model, dataset, cfg, state, epoch, cache, log))
    return state, history


def evaluate(model: Segmenter, items: Sequence[tuple], context_on: Optional[bool] = None,
             background_class: Optional[int] = None, ignore_label: Optional[int] = None,
             masks: Optional[Sequence[np.ndarray]] = None) -> ConfusionMatrix:
    """Confusion matrix of full-image predictions; ``masks`` restricts scoring to selected pixels."""
    cm = ConfusionMatrix(model.config.num_classes, background_class, ignore_label)
    for n, (stem, image, labels) in enumerate(items):
        pred = predict_full_image(model, image, context_on)
        if masks is not None:
            cm.accumulate(pred[masks[n]], np.asarray(labels)[masks[n]])
        else:
            cm.accumulate(pred, labels)
    return cm


def save_model(path, model: Segmenter, extra: Optional[dict] = None):
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path) -> tuple[Segmenter, dict]:
    arrays, meta = checkpoint.load(path)
    if "model" not in meta:
        raise ConfigurationError(f"{path}: checkpoint has no model config")
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(arrays)
    return model, meta
