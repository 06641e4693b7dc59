"""Synthetic multi-domain segmentation tasks.

Each task draws one shape family with task-specific texture statistics, so
streams of tasks exhibit controllable domain shift: the default roster moves
foreground/background intensities, channel tints, and noise levels far from
the broad "pretraining" mixture the frozen backbone is fitted on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .nn.rng import Rng

__all__ = [
    "TaskSpec",
    "Sample",
    "SampleList",
    "StreamTask",
    "AccessError",
    "SHAPE_FAMILIES",
    "DEFAULT_TASK_ROSTER",
    "OOD_TASK_PARAMS",
    "generate_stream",
    "make_task_spec",
    "render_sample",
    "sample_pretraining_batch",
    "permute_stream",
]

SHAPE_FAMILIES = ("ellipse", "rectangle", "blob", "ring", "stripe")

IMAGE_SIZE = 64


@dataclass(frozen=True)
class TaskSpec:
    """Identity and generative parameters of one segmentation task.

    `texture_jitter` is the half-width of a per-sample uniform shift applied
    to the foreground/background means: it controls within-task diversity,
    as opposed to `noise_level`, which is per-pixel.
    """

    task_id: int
    shape_family: str
    fg_mean: tuple[float, float, float]
    bg_mean: tuple[float, float, float]
    noise_level: float
    size_range: tuple[float, float]
    eccentricity_range: tuple[float, float]
    seed: int
    texture_jitter: float = 0.10
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.size_range[0] > self.size_range[1] or self.size_range[0] <= 0:
            raise ValueError(f"empty size range {self.size_range}")
        if self.eccentricity_range[0] > self.eccentricity_range[1]:
            raise ValueError(f"empty eccentricity range {self.eccentricity_range}")

    def texture_key(self) -> tuple:
        return (self.shape_family, self.fg_mean, self.bg_mean, self.noise_level)


@dataclass
class Sample:
    """One image/mask pair with its box prompt (pixel coordinates)."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (inclusive)


class AccessError(RuntimeError):
    """Raised when a locked training set is read after its stage."""


class SampleList(Sequence):
    """Sequence of samples that can be locked once its stage has passed.

    Continual protocols forbid revisiting earlier training sets; locking
    makes that structural instead of a convention.
    """

    def __init__(self, samples: list[Sample], task_id: int):
        self._samples = list(samples)
        self.task_id = task_id
        self.reads = 0
        self.locked = False

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index) -> Sample:
        if self.locked:
            raise AccessError(
                f"training data of task {self.task_id} was read after its stage"
            )
        self.reads += 1
        return self._samples[index]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def lock(self) -> None:
        self.locked = True

    def unlock(self) -> None:
        self.locked = False

    def raw(self) -> list[Sample]:
        """Unaudited view, for serialization only."""
        return self._samples


@dataclass
class StreamTask:
    spec: TaskSpec
    train: SampleList
    test: SampleList


# Task roster: nine distinct (shape family, texture) combinations, all far
# from the pretraining mixture (which is bright, mostly gray foreground on a
# dark background). The first three form the default continual stream.
DEFAULT_TASK_ROSTER: list[dict] = [
    dict(shape_family="ellipse", fg_mean=(0.12, 0.14, 0.18), bg_mean=(0.88, 0.85, 0.82),
         noise_level=0.03, size_range=(0.28, 0.45), eccentricity_range=(1.2, 2.2)),
    dict(shape_family="rectangle", fg_mean=(0.15, 0.20, 0.75), bg_mean=(0.95, 0.80, 0.45),
         noise_level=0.05, size_range=(0.25, 0.42), eccentricity_range=(1.0, 2.4)),
    dict(shape_family="blob", fg_mean=(0.50, 0.52, 0.50), bg_mean=(0.25, 0.85, 0.30),
         noise_level=0.08, size_range=(0.30, 0.48), eccentricity_range=(1.0, 1.0)),
    dict(shape_family="stripe", fg_mean=(0.15, 0.55, 0.15), bg_mean=(0.75, 0.15, 0.70),
         noise_level=0.05, size_range=(0.18, 0.30), eccentricity_range=(1.0, 1.0)),
    dict(shape_family="ring", fg_mean=(0.10, 0.10, 0.60), bg_mean=(0.75, 0.72, 0.25),
         noise_level=0.06, size_range=(0.30, 0.46), eccentricity_range=(1.0, 1.6)),
    dict(shape_family="rectangle", fg_mean=(0.25, 0.25, 0.25), bg_mean=(0.92, 0.90, 0.88),
         noise_level=0.08, size_range=(0.22, 0.40), eccentricity_range=(1.0, 3.0)),
    dict(shape_family="ellipse", fg_mean=(0.70, 0.30, 0.70), bg_mean=(0.25, 0.60, 0.25),
         noise_level=0.04, size_range=(0.25, 0.40), eccentricity_range=(1.0, 1.8)),
    dict(shape_family="blob", fg_mean=(0.20, 0.60, 0.75), bg_mean=(0.80, 0.45, 0.15),
         noise_level=0.06, size_range=(0.28, 0.44), eccentricity_range=(1.0, 1.0)),
    dict(shape_family="stripe", fg_mean=(0.85, 0.85, 0.30), bg_mean=(0.30, 0.12, 0.45),
         noise_level=0.10, size_range=(0.16, 0.28), eccentricity_range=(1.0, 1.0)),
]

# Held-out OOD task: textured like the pretraining mixture, so the frozen
# backbone alone segments it well and fallback behaviour is measurable.
OOD_TASK_PARAMS: dict = dict(
    shape_family="ring", fg_mean=(0.80, 0.78, 0.76), bg_mean=(0.18, 0.20, 0.22),
    noise_level=0.04, size_range=(0.30, 0.46), eccentricity_range=(1.0, 1.5),
)


def _task_seed(master_seed: int, task_id: int) -> int:
    # Keyed by task identity, not stream position: permuting the task order
    # must leave every per-task dataset bit-identical.
    return Rng(master_seed).child("task", task_id).seed


def make_task_spec(task_id: int, master_seed: int, params: dict | None = None,
                   image_size: int = IMAGE_SIZE) -> TaskSpec:
    if params is None:
        params = DEFAULT_TASK_ROSTER[task_id % len(DEFAULT_TASK_ROSTER)]
    return TaskSpec(
        task_id=task_id,
        seed=_task_seed(master_seed, task_id),
        image_size=image_size,
        **params,
    )


# -- shape rasterization -----------------------------------------------------


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _draw_mask(spec: TaskSpec, rng: Rng) -> np.ndarray:
    size = spec.image_size
    xs, ys = _grid(size)
    lo, hi = spec.size_range
    radius = rng.uniform(lo, hi) * size / 2.0
    ecc = rng.uniform(*spec.eccentricity_range)
    cx = rng.uniform(0.3, 0.7) * size
    cy = rng.uniform(0.3, 0.7) * size
    theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xs - cx) * ct + (ys - cy) * st
    v = -(xs - cx) * st + (ys - cy) * ct

    family = spec.shape_family
    if family == "ellipse":
        mask = (u / radius) ** 2 + (v * ecc / radius) ** 2 <= 1.0
    elif family == "rectangle":
        mask = (np.abs(u) <= radius) & (np.abs(v) <= radius / ecc)
    elif family == "ring":
        inner = radius * rng.uniform(0.45, 0.65)
        rr = np.sqrt(u**2 + (v * ecc) ** 2)
        mask = (rr <= radius) & (rr >= inner)
    elif family == "stripe":
        width = radius  # size_range is interpreted as stripe width here
        mask = np.abs(v) <= width / 2.0
    elif family == "blob":
        phi = np.arctan2(v, u)
        wobble = np.ones_like(phi)
        for k in (2, 3, 5):
            wobble += rng.uniform(0.08, 0.22) * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
        rr = np.sqrt(u**2 + v**2)
        mask = rr <= radius * wobble / wobble.max() * 1.1
    else:  # pragma: no cover - guarded by TaskSpec validation
        raise ValueError(family)
    return mask


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def _jitter_box(box, rng: Rng, size: int, fraction: float = 0.1):
    x0, y0, x1, y1 = box
    w, h = x1 - x0 + 1, y1 - y0 + 1
    jx, jy = fraction * w, fraction * h
    x0 = int(np.clip(round(x0 + rng.uniform(-jx, jx)), 0, size - 1))
    x1 = int(np.clip(round(x1 + rng.uniform(-jx, jx)), x0, size - 1))
    y0 = int(np.clip(round(y0 + rng.uniform(-jy, jy)), 0, size - 1))
    y1 = int(np.clip(round(y1 + rng.uniform(-jy, jy)), y0, size - 1))
    return x0, y0, x1, y1


def render_sample(spec: TaskSpec, rng: Rng, jitter_box: bool = False) -> Sample:
    """Draw one sample from the task's generative distribution."""
    size = spec.image_size
    mask = _draw_mask(spec, rng)
    while not mask.any():
        mask = _draw_mask(spec, rng)

    jitter = spec.texture_jitter
    fg_shift = rng.uniform(-jitter, jitter)
    bg_shift = rng.uniform(-jitter, jitter)
    image = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        image[c] = np.where(mask, spec.fg_mean[c] + fg_shift, spec.bg_mean[c] + bg_shift)
    image += rng.normal((3, size, size), std=spec.noise_level).astype(np.float64)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    box = _tight_box(mask)
    if jitter_box:
        box = _jitter_box(box, rng, size)
    return Sample(image=image, mask=mask[None].astype(np.float32), box=box)


def _render_many(spec: TaskSpec, n: int, rng: Rng, jitter: bool) -> list[Sample]:
    return [render_sample(spec, rng.child("sample", i), jitter_box=jitter) for i in range(n)]


def generate_stream(
    n_tasks: int,
    per_task_train: int,
    per_task_test: int,
    master_seed: int,
    roster: Sequence[dict] | None = None,
    image_size: int = IMAGE_SIZE,
) -> list[StreamTask]:
    """Sequential tasks with per-task train/test splits.

    Deterministic given `master_seed`; per-task data depend only on
    (master_seed, task_id), train and test draws use disjoint substreams.
    """
    if n_tasks < 1:
        raise ValueError("a stream needs at least one task")
    roster = list(roster) if roster is not None else DEFAULT_TASK_ROSTER
    if n_tasks > len(roster):
        raise ValueError(f"roster provides {len(roster)} tasks, asked for {n_tasks}")
    stream = []
    for task_id in range(n_tasks):
        spec = make_task_spec(task_id, master_seed, roster[task_id], image_size)
        task_rng = Rng(spec.seed)
        train = _render_many(spec, per_task_train, task_rng.child("train"), jitter=True)
        test = _render_many(spec, per_task_test, task_rng.child("test"), jitter=False)
        stream.append(StreamTask(spec=spec,
                                 train=SampleList(train, task_id),
                                 test=SampleList(test, task_id)))
    return stream


def permute_stream(stream: list[StreamTask], order: Sequence[int]) -> list[StreamTask]:
    """Reorder tasks (fresh audit wrappers, same underlying data)."""
    if sorted(order) != list(range(len(stream))):
        raise ValueError(f"order {order} is not a permutation of the stream")
    return [
        StreamTask(
            spec=stream[i].spec,
            train=SampleList(stream[i].train.raw(), stream[i].spec.task_id),
            test=SampleList(stream[i].test.raw(), stream[i].spec.task_id),
        )
        for i in order
    ]


# -- pretraining mixture -------------------------------------------------------

PRETRAIN_PARAMS = dict(
    fg_base=(0.55, 0.9),
    bg_base=(0.08, 0.4),
    channel_jitter=0.05,
    noise=(0.02, 0.08),
    size_range=(0.22, 0.48),
    eccentricity_range=(1.0, 2.5),
)


def sample_pretraining_batch(n: int, rng: Rng, image_size: int = IMAGE_SIZE) -> list[Sample]:
    """Broad mixture covering every shape family with randomized bright-on-dark
    textures; this is the distribution the backbone is pretrained and scored on."""
    p = PRETRAIN_PARAMS
    samples = []
    for i in range(n):
        draw = rng.child("mix", i)
        family = SHAPE_FAMILIES[draw.integers(0, len(SHAPE_FAMILIES))]
        fg = draw.uniform(*p["fg_base"])
        bg = draw.uniform(*p["bg_base"])
        jit = p["channel_jitter"]
        spec = TaskSpec(
            task_id=-1,
            shape_family=family,
            fg_mean=tuple(float(np.clip(fg + draw.uniform(-jit, jit), 0, 1)) for _ in range(3)),
            bg_mean=tuple(float(np.clip(bg + draw.uniform(-jit, jit), 0, 1)) for _ in range(3)),
            noise_level=draw.uniform(*p["noise"]),
            size_range=p["size_range"] if family != "stripe" else (0.16, 0.3),
            eccentricity_range=p["eccentricity_range"],
            seed=draw.seed,
            texture_jitter=0.0,  # the mixture randomizes its means directly
            image_size=image_size,
        )
        samples.append(render_sample(spec, draw.child("px"), jitter_box=False))
    return samples
