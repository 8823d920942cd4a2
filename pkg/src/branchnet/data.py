"""Dataset ingestion (CIFAR-10 binary records, deterministic synthetic
renderer) and binary checkpointing.

Checkpoint format: magic ``BRNCHNET``, 4-byte little-endian version, a
length-prefixed JSON block (configs, epoch counter, RNG cursor, tensor
count), then a tensor table of records: u32 name length + UTF-8 name,
1-byte dtype tag (0=float64, 1=float32), 1-byte rank, u64 extents, raw
little-endian payload. Writes are atomic (temp file + rename); round trips
are bitwise exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, PcaBasis
from .model import BranchedNetConfig

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-planar pixels
CHECKPOINT_MAGIC = b"BRNCHNET"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, 3) uint8
    labels: np.ndarray          # (N,) int64
    num_classes: int
    split: str = ""
    source: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images ({len(self.images)}) and labels ({len(self.labels)}) "
                "must have equal length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.images)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format

def load_cifar10_binary(directory, files: Optional[Sequence[str]] = None,
                        split: str = "") -> Dataset:
    """Read 3073-byte records (label, then 32x32 R/G/B planes, row-major).

    ``files`` defaults to every ``*.bin`` in the directory, sorted by name
    so the sample order is stable.
    """
    directory = Path(directory)
    if files is None:
        files = sorted(p.name for p in directory.glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin files found in {directory}")
    images = []
    labels = []
    for fname in files:
        raw = (directory / fname).read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            raise ValueError(
                f"{fname}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        file_labels = records[:, 0].astype(np.int64)
        if file_labels.size and int(file_labels.max()) >= 10:
            raise ValueError(
                f"{fname}: label {int(file_labels.max())} out of range (must be < 10)")
        pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(pixels)
        labels.append(file_labels)
    return Dataset(images=np.concatenate(images), labels=np.concatenate(labels),
                   num_classes=10, split=split,
                   source="cifar10:" + ",".join(files))


# ---------------------------------------------------------------------------
# synthetic renderer

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 50
    image_size: int = 32
    noise_std: float = 8.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1 or self.image_size < 8:
            raise ValueError("samples_per_class must be >= 1 and image_size >= 8")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def class_template(c: int, spec: SyntheticSpec) -> np.ndarray:
    """Noiseless class-c image: an axis-aligned colored rectangle whose
    color and position are deterministic functions of c."""
    s = spec.image_size
    img = np.full((s, s, 3), 96.0)
    angle = 2.0 * np.pi * c / spec.num_classes
    # rectangle center stays in the middle half so small crops keep it visible
    cy = s / 2.0 + 0.22 * s * np.sin(angle)
    cx = s / 2.0 + 0.22 * s * np.cos(angle)
    half = max(2, s // 6)
    y0, y1 = int(round(cy - half)), int(round(cy + half))
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    phase = 2.0 * np.pi * c / spec.num_classes
    color = 127.5 + 120.0 * np.array([np.sin(phase),
                                      np.sin(phase + 2.0 * np.pi / 3.0),
                                      np.sin(phase + 4.0 * np.pi / 3.0)])
    img[max(y0, 0):min(y1, s), max(x0, 0):min(x1, s)] = color
    return img


def generate_synthetic(spec: SyntheticSpec, seed: int, split: str = "") -> Dataset:
    """Deterministic rectangles-plus-Gaussian-noise dataset; images of a
    class are identical when noise_std is 0."""
    rng = np.random.default_rng(np.random.SeedSequence((seed,) + tuple(b"synthetic")))
    templates = [class_template(c, spec) for c in range(spec.num_classes)]
    images = []
    labels = []
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            noisy = templates[c] + rng.normal(0.0, spec.noise_std, templates[c].shape)
            images.append(np.clip(noisy, 0.0, 255.0).astype(np.uint8))
            labels.append(c)
    return Dataset(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
                   num_classes=spec.num_classes, split=split,
                   source=f"synthetic:seed={seed}")


# ---------------------------------------------------------------------------
# PPM (P6) image dumps

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval as whitespace-separated tokens
    # (comment lines starting with '#' allowed), then a single whitespace byte
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # the single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    if pixels.size != h * w * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model_config: BranchedNetConfig
    train_config: object            # training.TrainConfig (import cycle avoided)
    augment_config: AugmentConfig
    epoch: int
    rng_cursor: dict
    tensors: dict[str, np.ndarray]


def _augment_to_json(aug: AugmentConfig) -> dict:
    d = asdict(aug)
    # arrays move to the tensor table; mark presence only
    d["channel_means"] = aug.channel_means is not None
    d["channel_stds"] = aug.channel_stds is not None
    d["pca_basis"] = aug.pca_basis is not None
    return d


def _augment_arrays(aug: AugmentConfig) -> dict[str, np.ndarray]:
    arrays = {}
    if aug.channel_means is not None:
        arrays["augment/channel_means"] = aug.channel_means
    if aug.channel_stds is not None:
        arrays["augment/channel_stds"] = aug.channel_stds
    if aug.pca_basis is not None:
        arrays["augment/pca_eigenvalues"] = aug.pca_basis.eigenvalues
        arrays["augment/pca_eigenvectors"] = aug.pca_basis.eigenvectors
        arrays["augment/pca_channel_means"] = aug.pca_basis.channel_means
    return arrays


def _augment_from_parts(meta: dict, arrays: dict[str, np.ndarray]) -> AugmentConfig:
    basis = None
    if meta.pop("pca_basis"):
        basis = PcaBasis(eigenvalues=arrays["augment/pca_eigenvalues"],
                         eigenvectors=arrays["augment/pca_eigenvectors"],
                         channel_means=arrays["augment/pca_channel_means"])
    means = arrays["augment/channel_means"] if meta.pop("channel_means") else None
    stds = arrays["augment/channel_stds"] if meta.pop("channel_stds") else None
    return AugmentConfig(channel_means=means, channel_stds=stds,
                         pca_basis=basis, **meta)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Atomic write: serialize to a temp file in the target directory, then
    rename over the destination."""
    from .training import TrainConfig  # local import to avoid a module cycle

    assert isinstance(checkpoint.train_config, TrainConfig)
    tensors = dict(checkpoint.tensors)
    tensors.update(_augment_arrays(checkpoint.augment_config))
    header = {
        "model": asdict(checkpoint.model_config),
        "train": asdict(checkpoint.train_config),
        "augment": _augment_to_json(checkpoint.augment_config),
        "epoch": checkpoint.epoch,
        "rng_cursor": checkpoint.rng_cursor,
        "tensor_count": len(tensors),
    }
    blob = json.dumps(header, sort_keys=True).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for name in sorted(tensors):
                arr = np.ascontiguousarray(tensors[name])
                if arr.dtype not in _DTYPE_TAGS:
                    arr = arr.astype(np.float64)
                encoded = name.encode()
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
                f.write(struct.pack("<B", arr.ndim))
                for extent in arr.shape:
                    f.write(struct.pack("<Q", extent))
                f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, context: str):
        self.raw = raw
        self.pos = 0
        self.context = context

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint while reading {what} "
                f"(at {self.context}, offset {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Checkpoint:
    from .training import TrainConfig  # local import to avoid a module cycle

    raw = Path(path).read_bytes()
    rd = _Reader(raw, "header")
    magic = rd.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", rd.take(4, "header length"))
    header = json.loads(rd.take(blob_len, "JSON header"))

    tensors: dict[str, np.ndarray] = {}
    for _ in range(header["tensor_count"]):
        (name_len,) = struct.unpack("<I", rd.take(4, "tensor name length"))
        name = rd.take(name_len, "tensor name").decode()
        rd.context = name
        (tag,) = struct.unpack("<B", rd.take(1, "dtype tag"))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
        dtype = _TAG_DTYPES[tag]
        (rank,) = struct.unpack("<B", rd.take(1, "rank"))
        shape = tuple(struct.unpack("<Q", rd.take(8, "extent"))[0] for _ in range(rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = rd.take(nbytes, "payload")
        tensors[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")) \
            .astype(dtype).reshape(shape)
    if rd.pos != len(raw):
        raise CheckpointError(f"{len(raw) - rd.pos} trailing bytes after tensor table")

    augment_arrays = {k: tensors.pop(k) for k in list(tensors) if k.startswith("augment/")}
    return Checkpoint(
        model_config=BranchedNetConfig(**header["model"]),
        train_config=TrainConfig(**header["train"]),
        augment_config=_augment_from_parts(dict(header["augment"]), augment_arrays),
        epoch=header["epoch"],
        rng_cursor=header["rng_cursor"],
        tensors=tensors)
