"""The frozen encoder-decoder backbone.

A small convolutional encoder maps a (3,64,64) image to a (32,16,16) feature
map; the decoder consumes those features plus a box-prompt channel and emits
mask logits at image resolution. The pair is pretrained once on the broad
synthetic mixture and then permanently frozen: every adaptation mechanism in
this package operates strictly between the two halves.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Sample, sample_pretraining_batch
from .nn import (
    Conv2d,
    ConvTranspose2d,
    LayerNorm2d,
    Module,
    Rng,
    Tensor,
    concat,
)
from .training import batch_arrays, segmentation_loss, train_loop

__all__ = [
    "BackboneConfig",
    "FrozenBackbone",
    "Encoder",
    "Decoder",
    "PretrainingError",
    "pretrain_backbone",
]


class PretrainingError(RuntimeError):
    """The backbone failed its held-out quality gate; downstream continual
    experiments would be meaningless, so the run is aborted."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    feature_channels: int = 32
    feature_size: int = 16
    n_train: int = 512
    n_holdout: int = 64
    epochs: int = 12
    batch_size: int = 8
    lr: float = 1e-3
    min_holdout_iou: float = 0.7

    def content_key(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Encoder(Module):
    """Three conv stages: 3 -> 16 -> 32 -> 32 channels at 1/4 resolution."""

    def __init__(self, rng: Rng):
        self.c1a = Conv2d(3, 16, 3, stride=2, rng=rng.child("c1a"))
        self.c1b = Conv2d(16, 16, 3, rng=rng.child("c1b"))
        self.n1 = LayerNorm2d(16)
        self.c2a = Conv2d(16, 32, 3, stride=2, rng=rng.child("c2a"))
        self.c2b = Conv2d(32, 32, 3, rng=rng.child("c2b"))
        self.n2 = LayerNorm2d(32)
        self.c3a = Conv2d(32, 48, 3, rng=rng.child("c3a"))
        self.c3b = Conv2d(48, 32, 3, rng=rng.child("c3b"))
        self.n3 = LayerNorm2d(32)

    def forward(self, x: Tensor) -> Tensor:
        h = self.n1(self.c1b(self.c1a(x).relu())).relu()
        h = self.n2(self.c2b(self.c2a(h).relu())).relu()
        # final stage keeps signed features (no trailing ReLU)
        return self.n3(self.c3b(self.c3a(h).relu()))


class Decoder(Module):
    """Two transposed-conv stages back to image resolution; the box prompt
    enters as an extra input channel alongside the feature map."""

    def __init__(self, rng: Rng, feature_channels: int = 32):
        c = feature_channels
        self.u1 = ConvTranspose2d(c + 1, 32, 4, stride=2, padding=1, rng=rng.child("u1"))
        self.r1 = Conv2d(32, 32, 3, rng=rng.child("r1"))
        self.n1 = LayerNorm2d(32)
        self.u2 = ConvTranspose2d(32, 16, 4, stride=2, padding=1, rng=rng.child("u2"))
        self.r2 = Conv2d(16, 16, 3, rng=rng.child("r2"))
        self.n2 = LayerNorm2d(16)
        self.head = Conv2d(16, 1, 3, rng=rng.child("head"))

    def forward(self, features: Tensor, box_channel: Tensor) -> Tensor:
        h = concat([features, box_channel], axis=1)
        h = self.n1(self.r1(self.u1(h).relu())).relu()
        h = self.n2(self.r2(self.u2(h).relu())).relu()
        return self.head(h)


@dataclass
class FrozenBackbone:
    encoder: Encoder
    decoder: Decoder
    config: BackboneConfig
    seed: int
    holdout_iou: float

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        c = self.config.feature_channels
        s = self.config.feature_size
        return (c, s, s)

    def encode(self, images, boxes=None) -> Tensor:
        """Feature maps for a (B,3,H,W) batch (or a single (3,H,W) image).

        Box prompts do not influence the encoder; the argument is accepted
        for interface symmetry with `decode`.
        """
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        z = self.encoder(Tensor(arr))
        return z[0] if single else z

    def encode_array(self, images: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Encode a (N,3,H,W) array in chunks, returning plain features."""
        parts = [self.encode(images[i : i + chunk]).data for i in range(0, len(images), chunk)]
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    def decode(self, features: Tensor, box_channel: Tensor) -> Tensor:
        """Mask logits (B,1,H,W) from aligned features and a box channel."""
        expected = self.feature_shape
        if tuple(features.shape[1:]) != expected:
            raise ValueError(
                f"feature shape {tuple(features.shape[1:])} does not match "
                f"backbone feature shape {expected}"
            )
        return self.decoder(features, box_channel)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for module in (self.encoder, self.decoder):
            for name, p in module.named_parameters():
                digest.update(name.encode())
                digest.update(p.data.tobytes())
        return digest.hexdigest()

    def num_parameters(self) -> int:
        return self.encoder.num_parameters() + self.decoder.num_parameters()


def _mean_iou(logits: np.ndarray, masks: np.ndarray) -> float:
    pred = logits > 0.0
    true = masks > 0.5
    scores = []
    for p, t in zip(pred, true):
        union = np.logical_or(p, t).sum()
        inter = np.logical_and(p, t).sum()
        scores.append(1.0 if union == 0 else inter / union)
    return float(np.mean(scores))


def evaluate_backbone(encoder: Encoder, decoder: Decoder, samples: list[Sample],
                      feature_size: int, batch_size: int = 16) -> float:
    """Mean IoU of the raw encoder-decoder on a sample list."""
    scores = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        images, masks, boxes = batch_arrays(chunk, feature_size)
        logits = decoder(encoder(Tensor(images)), Tensor(boxes))
        scores.append(_mean_iou(logits.data, masks) * len(chunk))
    return float(np.sum(scores) / len(samples))


def pretrain_backbone(config: BackboneConfig, seed: int) -> FrozenBackbone:
    """Jointly train encoder and decoder on the broad mixture, then freeze.

    Raises PretrainingError if the held-out IoU floor is not reached.
    """
    rng = Rng(seed)
    encoder = Encoder(rng.child("encoder"))
    decoder = Decoder(rng.child("decoder"), config.feature_channels)

    train = sample_pretraining_batch(config.n_train, rng.child("data", "train"),
                                     config.image_size)
    holdout = sample_pretraining_batch(config.n_holdout, rng.child("data", "holdout"),
                                       config.image_size)

    images, masks, boxes = batch_arrays(train, config.feature_size)

    def batch_loss(idx: np.ndarray) -> Tensor:
        logits = decoder(encoder(Tensor(images[idx])), Tensor(boxes[idx]))
        return segmentation_loss(logits, Tensor(masks[idx]))

    params = encoder.parameters() + decoder.parameters()
    train_loop(
        params, batch_loss, len(train),
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
        rng=rng.child("loop"), context="backbone pretraining",
    )

    holdout_iou = evaluate_backbone(encoder, decoder, holdout, config.feature_size)
    if holdout_iou < config.min_holdout_iou:
        raise PretrainingError(
            f"backbone reached held-out IoU {holdout_iou:.3f} < "
            f"{config.min_holdout_iou:.2f}; increase epochs or training size"
        )

    encoder.freeze()
    decoder.freeze()
    return FrozenBackbone(encoder=encoder, decoder=decoder, config=config,
                          seed=seed, holdout_iou=holdout_iou)
