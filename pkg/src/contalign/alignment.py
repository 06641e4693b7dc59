"""The trainable alignment layer inserted between the frozen encoder and
decoder, plus the fixed identity layer used as the OOD fallback.

Each block runs a two-conv branch, gates it channel-wise with a sigmoid of
a 1-D convolved pooled descriptor, adds the input back, and renormalizes.
The identity layer carries no parameters and returns its input unchanged,
bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .backbone import FrozenBackbone
from .data import Sample
from .nn import (
    ChannelConv1d,
    Conv2d,
    LayerNorm2d,
    Module,
    Rng,
    Tensor,
    global_avg_pool,
)
from .training import batch_arrays, segmentation_loss, train_loop

__all__ = [
    "IDENTITY_TASK",
    "ChannelAttentionResBlock",
    "AlignmentLayer",
    "train_alignment",
]

IDENTITY_TASK = -1

DEFAULT_N_BLOCKS = 4
DEFAULT_EPOCHS = 24
DEFAULT_LR = 1e-4
DEFAULT_BATCH = 6


class ChannelAttentionResBlock(Module):
    """Residual block with a channel-attention gate on the conv branch."""

    def __init__(self, channels: int, rng: Rng, kernel_1d: int = 3):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng.child("conv1"))
        self.conv2 = Conv2d(channels, channels, 3, rng=rng.child("conv2"))
        self.channel_conv = ChannelConv1d(kernel_1d, rng=rng.child("gate"))
        self.norm = LayerNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        u = self.conv2(self.conv1(x).relu())
        descriptor = global_avg_pool(u)
        gate = self.channel_conv(descriptor).sigmoid()
        b, c = gate.shape
        gated = u * gate.reshape(b, c, 1, 1)
        return self.norm(x + gated)


class AlignmentLayer(Module):
    """A stack of channel-attention residual blocks bound to one task.

    `AlignmentLayer.identity()` builds the parameter-free fallback whose
    forward pass returns the input tensor itself.
    """

    def __init__(self, channels: int, n_blocks: int, task_id: int, rng: Rng):
        self.task_id = task_id
        self.channels = channels
        self.blocks = [
            ChannelAttentionResBlock(channels, rng.child("block", i))
            for i in range(n_blocks)
        ]

    @classmethod
    def identity(cls, channels: int = 0) -> "AlignmentLayer":
        layer = cls.__new__(cls)
        layer.task_id = IDENTITY_TASK
        layer.channels = channels
        layer.blocks = []
        return layer

    @property
    def is_identity(self) -> bool:
        return self.task_id == IDENTITY_TASK and not self.blocks

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, z: Tensor) -> Tensor:
        if self.is_identity:
            return z
        h = z
        for block in self.blocks:
            h = block(h)
        return h

    def clone(self) -> "AlignmentLayer":
        if self.is_identity:
            return AlignmentLayer.identity(self.channels)
        dup = AlignmentLayer(self.channels, self.n_blocks, self.task_id, Rng(0))
        dup.load_state(self.state_arrays())
        return dup

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(p.data.tobytes())
        return digest.hexdigest()


def train_alignment(
    samples,
    backbone: FrozenBackbone,
    layer: AlignmentLayer,
    *,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH,
    rng: Rng,
    extra_loss=None,
    after_step=None,
) -> list[float]:
    """Fit one alignment layer on one task; the backbone never updates.

    `extra_loss(idx, z, box_t, logits) -> Tensor | None` lets continual
    strategies add regularizers (distillation, parameter penalties) on top
    of the segmentation loss. Returns per-epoch mean losses.
    """
    if layer.is_identity:
        raise ValueError("the identity alignment layer is not trainable")
    images, masks, boxes = batch_arrays(samples, backbone.config.feature_size)
    # The encoder is frozen, so per-sample features are computed once.
    features = backbone.encode_array(images)

    def batch_loss(idx: np.ndarray) -> Tensor:
        z = Tensor(features[idx])
        box_t = Tensor(boxes[idx])
        logits = backbone.decode(layer(z), box_t)
        loss = segmentation_loss(logits, Tensor(masks[idx]))
        if extra_loss is not None:
            extra = extra_loss(idx, z, box_t, logits)
            if extra is not None:
                loss = loss + extra
        return loss

    return train_loop(
        layer.parameters(), batch_loss, len(samples),
        epochs=epochs, batch_size=batch_size, lr=lr,
        rng=rng.child("fit"),
        after_step=after_step,
        context=f"alignment task {layer.task_id}",
    )
