"""Shared training-loop machinery: batching, the segmentation loss, and a
deterministic Adam loop with NaN abort."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .data import Sample
from .nn import Adam, Parameter, Rng, Tensor

__all__ = [
    "TrainingDivergedError",
    "segmentation_loss",
    "box_feature_channel",
    "batch_arrays",
    "epoch_batches",
    "train_loop",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def segmentation_loss(logits: Tensor, masks: Tensor) -> Tensor:
    """Mean of binary cross-entropy (from logits) and soft Dice."""
    bce = (logits.softplus() - logits * masks).mean()
    p = logits.sigmoid()
    inter = (p * masks).sum(axis=(1, 2, 3))
    total = p.sum(axis=(1, 2, 3)) + masks.sum(axis=(1, 2, 3))
    dice = 1.0 - ((inter * 2.0 + 1.0) / (total + 1.0)).mean()
    return (bce + dice) * 0.5


def box_feature_channel(box, image_size: int, feature_size: int) -> np.ndarray:
    """Rasterize a pixel-space box prompt onto the feature grid."""
    x0, y0, x1, y1 = box
    scale = feature_size / image_size
    fx0, fy0 = int(x0 * scale), int(y0 * scale)
    fx1, fy1 = int(x1 * scale), int(y1 * scale)
    channel = np.zeros((1, feature_size, feature_size), dtype=np.float32)
    channel[0, fy0 : fy1 + 1, fx0 : fx1 + 1] = 1.0
    return channel


def batch_arrays(samples: Sequence[Sample], feature_size: int):
    """Stack a list of samples into (images, masks, box channels) arrays."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    image_size = images.shape[-1]
    boxes = np.stack([box_feature_channel(s.box, image_size, feature_size) for s in samples])
    return images, masks, boxes


def epoch_batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_loop(
    params: list[Parameter],
    batch_loss: Callable[[np.ndarray], Tensor],
    n_samples: int,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: Rng,
    after_step: Callable[[np.ndarray], None] | None = None,
    context: str = "training",
) -> list[float]:
    """Generic minibatch Adam loop. Returns per-epoch mean losses.

    Aborts with diagnostics the moment a loss stops being finite; silent NaN
    runs would poison every downstream comparison.
    """
    opt = Adam(params, lr=lr)
    history: list[float] = []
    for epoch in range(epochs):
        losses = []
        for step, idx in enumerate(epoch_batches(n_samples, batch_size, rng.child("epoch", epoch))):
            loss = batch_loss(idx)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"{context}: non-finite loss at epoch {epoch}, step {step}"
                )
            loss.backward()
            opt.step()
            opt.zero_grad()
            losses.append(value)
            if after_step is not None:
                after_step(idx)
        history.append(float(np.mean(losses)))
    return history
