"""Binary containers and directory layouts for persisted artifacts.

One framed binary format carries named float32 arrays for every kind of
checkpoint (alignment layers, task VAEs, the backbone); router pools and
datasets are directories holding a JSON manifest plus binary payload files.
All integers and floats are little-endian, so files round-trip bitwise on
any platform.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .alignment import IDENTITY_TASK, AlignmentLayer
from .backbone import BackboneConfig, Decoder, Encoder, FrozenBackbone
from .data import Sample, SampleList, StreamTask, TaskSpec
from .nn import Rng
from .router import RouterPool, TaskVAE

__all__ = [
    "FormatError",
    "write_array_pack",
    "read_array_pack",
    "save_alignment",
    "load_alignment",
    "save_vae",
    "load_vae",
    "save_backbone",
    "load_backbone",
    "save_pool",
    "load_pool",
    "export_stream",
    "import_stream",
]

ALIGNMENT_MAGIC = b"ALNLAYR1"
VAE_MAGIC = b"TASKVAE1"
BACKBONE_MAGIC = b"FRZBKBN1"
SAMPLE_MAGIC = b"SEGSAMP1"

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for unrecognized magic bytes, versions, or corrupt framing."""


def write_array_pack(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Frame layout: magic(8) | version(u32) | meta_len(u32) | meta json |
    n_arrays(u32) | per array: name_len(u16), name, ndim(u8), dims(u32...),
    float32 little-endian data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<B", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(arr32.tobytes())


def read_array_pack(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        got = fh.read(8)
        if got != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, found {got!r}")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            arrays[name] = data.astype(np.float32)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after payload")
    return meta, arrays


# -- alignment layers ---------------------------------------------------------


def save_alignment(path, layer: AlignmentLayer) -> None:
    meta = {"task_id": layer.task_id, "n_blocks": layer.n_blocks,
            "channels": layer.channels}
    write_array_pack(path, ALIGNMENT_MAGIC, meta, dict(layer.state_arrays()))


def load_alignment(path) -> AlignmentLayer:
    meta, arrays = read_array_pack(path, ALIGNMENT_MAGIC)
    if meta["task_id"] == IDENTITY_TASK and meta["n_blocks"] == 0:
        return AlignmentLayer.identity(meta["channels"])
    layer = AlignmentLayer(meta["channels"], meta["n_blocks"], meta["task_id"], Rng(0))
    layer.load_state(arrays)
    return layer


# -- task VAEs -----------------------------------------------------------------


def save_vae(path, vae: TaskVAE) -> None:
    meta = {
        "feature_dim": vae.feature_dim,
        "latent_dim": vae.latent_dim,
        "hidden_dim": vae.hidden_dim,
        "beta": vae.beta,
        "fit_epochs": vae.fit_epochs,
        "fit_lr": vae.fit_lr,
        "fit_batch": vae.fit_batch,
    }
    write_array_pack(path, VAE_MAGIC, meta, dict(vae.state_arrays()))


def load_vae(path) -> TaskVAE:
    meta, arrays = read_array_pack(path, VAE_MAGIC)
    vae = TaskVAE(meta["feature_dim"], latent_dim=meta["latent_dim"],
                  hidden_dim=meta["hidden_dim"], beta=meta["beta"], rng=Rng(0))
    vae.fit_epochs = meta["fit_epochs"]
    vae.fit_lr = meta["fit_lr"]
    vae.fit_batch = meta["fit_batch"]
    vae.load_state(arrays)
    return vae


# -- the frozen backbone ----------------------------------------------------------


def save_backbone(path, backbone: FrozenBackbone) -> None:
    meta = {
        "config": backbone.config.__dict__,
        "seed": backbone.seed,
        "holdout_iou": backbone.holdout_iou,
    }
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("encoder", backbone.encoder), ("decoder", backbone.decoder)):
        for name, p in module.named_parameters():
            arrays[f"{prefix}.{name}"] = p.data
    write_array_pack(path, BACKBONE_MAGIC, meta, arrays)


def load_backbone(path) -> FrozenBackbone:
    meta, arrays = read_array_pack(path, BACKBONE_MAGIC)
    config = BackboneConfig(**meta["config"])
    encoder = Encoder(Rng(0))
    decoder = Decoder(Rng(0), config.feature_channels)
    encoder.load_state({k[len("encoder."):]: v for k, v in arrays.items()
                        if k.startswith("encoder.")})
    decoder.load_state({k[len("decoder."):]: v for k, v in arrays.items()
                        if k.startswith("decoder.")})
    encoder.freeze()
    decoder.freeze()
    return FrozenBackbone(encoder=encoder, decoder=decoder, config=config,
                          seed=meta["seed"], holdout_iou=meta["holdout_iou"])


# -- router pools ------------------------------------------------------------------


def save_pool(directory, pool: RouterPool) -> None:
    """A pool is a manifest plus per-task alignment/VAE checkpoint files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "router-pool",
        "version": FORMAT_VERSION,
        "temperature": pool.temperature,
        "rule": pool.rule,
        "tasks": [
            {
                "task_id": task_id,
                "tau": pool.entries[task_id].tau,
                "beta": pool.entries[task_id].vae.beta,
                "latent_dim": pool.entries[task_id].vae.latent_dim,
                "alignment_file": f"task_{task_id}_alignment.bin",
                "vae_file": f"task_{task_id}_vae.bin",
            }
            for task_id in pool.task_ids()
        ],
    }
    for task_id in pool.task_ids():
        entry = pool.entries[task_id]
        save_alignment(directory / f"task_{task_id}_alignment.bin", entry.layer)
        save_vae(directory / f"task_{task_id}_vae.bin", entry.vae)
    (directory / "pool.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_pool(directory) -> RouterPool:
    directory = Path(directory)
    manifest_path = directory / "pool.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no pool.json manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "router-pool":
        raise FormatError(f"{directory}: not a router pool manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{directory}: unsupported pool version")
    pool = RouterPool(temperature=manifest["temperature"], rule=manifest["rule"])
    for entry in manifest["tasks"]:
        layer = load_alignment(directory / entry["alignment_file"])
        vae = load_vae(directory / entry["vae_file"])
        pool.add(entry["task_id"], layer, vae, entry["tau"])
    return pool


# -- dataset export ------------------------------------------------------------------


def _write_sample(path, sample: Sample) -> None:
    """magic(8) | version(u32) | box(4 x i32) | dims: C,H,W (u32) | image
    float32 LE | mask float32 LE."""
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<4i", *sample.box))
        c, h, w = sample.image.shape
        fh.write(struct.pack("<3I", c, h, w))
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.mask, dtype="<f4").tobytes())


def _read_sample(path) -> Sample:
    with open(path, "rb") as fh:
        got = fh.read(8)
        if got != SAMPLE_MAGIC:
            raise FormatError(f"{path}: bad sample magic {got!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported sample version {version}")
        box = struct.unpack("<4i", fh.read(16))
        c, h, w = struct.unpack("<3I", fh.read(12))
        image = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4").reshape(c, h, w)
        mask = np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(1, h, w)
    return Sample(image=image.astype(np.float32), mask=mask.astype(np.float32),
                  box=tuple(int(b) for b in box))


def export_stream(directory, stream: list[StreamTask]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tasks_meta = []
    for task in stream:
        spec = task.spec
        entry = {
            "spec": {
                "task_id": spec.task_id,
                "shape_family": spec.shape_family,
                "fg_mean": list(spec.fg_mean),
                "bg_mean": list(spec.bg_mean),
                "noise_level": spec.noise_level,
                "size_range": list(spec.size_range),
                "eccentricity_range": list(spec.eccentricity_range),
                "seed": spec.seed,
                "texture_jitter": spec.texture_jitter,
                "image_size": spec.image_size,
            },
            "train": [],
            "test": [],
        }
        for split in ("train", "test"):
            samples = getattr(task, split).raw()
            for i, sample in enumerate(samples):
                fname = f"task{spec.task_id}_{split}_{i:04d}.bin"
                _write_sample(directory / fname, sample)
                entry[split].append(fname)
        tasks_meta.append(entry)
    meta = {"kind": "task-stream", "version": FORMAT_VERSION, "tasks": tasks_meta}
    (directory / "stream.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def import_stream(directory) -> list[StreamTask]:
    directory = Path(directory)
    meta_path = directory / "stream.json"
    if not meta_path.exists():
        raise FormatError(f"{directory}: no stream.json manifest")
    meta = json.loads(meta_path.read_text())
    if meta.get("kind") != "task-stream":
        raise FormatError(f"{directory}: not a task-stream manifest")
    stream = []
    for entry in meta["tasks"]:
        spec_kw = dict(entry["spec"])
        spec_kw["fg_mean"] = tuple(spec_kw["fg_mean"])
        spec_kw["bg_mean"] = tuple(spec_kw["bg_mean"])
        spec_kw["size_range"] = tuple(spec_kw["size_range"])
        spec_kw["eccentricity_range"] = tuple(spec_kw["eccentricity_range"])
        spec = TaskSpec(**spec_kw)
        train = [_read_sample(directory / f) for f in entry["train"]]
        test = [_read_sample(directory / f) for f in entry["test"]]
        stream.append(StreamTask(spec=spec,
                                 train=SampleList(train, spec.task_id),
                                 test=SampleList(test, spec.task_id)))
    return stream
