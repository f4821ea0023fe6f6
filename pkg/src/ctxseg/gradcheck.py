"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

# denominator floor; central-difference roundoff at step 1e-5 is ~1e-10 absolute
REL_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_grad(loss_fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``t`` (others left at zero)."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp = float(loss_fn().data)
        flat[i] = orig - step
        with no_grad():
            fm = float(loss_fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


@dataclass
class GradReport:
    per_tensor: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], names=None,
                    step: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> GradReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``max_entries`` caps the number of probed entries per tensor (sampled
    without replacement, deterministically from ``seed``).
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    report = GradReport()
    names = names or [getattr(t, "name", "") or f"t{i}" for i, t in enumerate(tensors)]
    for name, t in zip(names, tensors):
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        num = numerical_grad(loss_fn, t, step, idx)
        err = relative_error(t.grad.reshape(-1)[idx], num.reshape(-1)[idx])
        report.per_tensor[name] = float(err.max()) if err.size else 0.0
    return report


def check_model_gradients(cfg, seed: int = 0, batch: int = 2) -> GradReport:
    """Check every parameter of a context-enabled model built from ``cfg`` in 64-bit.

    Alpha is set to random nonzero values so the attention path carries gradient.
    Neighbor encodings are computed once at the unperturbed parameters: within
    a training step they are constants, so the finite differences must not
    move them either.
    """
    from dataclasses import replace

    from .fusion import encode_neighbors
    from .model import build_model, forward_batch
    from .tensor import cross_entropy

    cfg = replace(cfg, context_enabled=True, dtype="float64")
    model = build_model(cfg)
    rng = np.random.default_rng(seed)
    S, ch = cfg.patch_size, cfg.in_channels
    patches = rng.random((batch, S, S, ch))
    neighbors = rng.random((batch * 8, S, S, ch))
    neighbors[:3] = 0.0  # zero-extrapolated slots
    labels = rng.integers(0, cfg.num_classes, (batch, S, S))
    model.gate.alpha.data = rng.standard_normal(model.gate.alpha.shape)

    n_e = encode_neighbors(model.encoder, neighbors)
    n_e = n_e.reshape((batch, 8) + n_e.shape[1:])

    def loss():
        return cross_entropy(forward_batch(model, patches, n_e, True), labels)

    params = model.parameters()
    return check_gradients(loss, params, [p.name for p in params])
