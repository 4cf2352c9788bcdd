"""Synthetic ultra-fine-grained image data and its binary container.

Each macro-category owns a smooth random texture. Classes inside a macro
differ only by a faint signature patch at a class-specific location, while
every sample gets its own noise and a random circular shift, so the
within-class spread dwarfs the between-class difference.

File layout (little-endian)::

    b"UFGD" | u32 version | u64 samples | u32 classes | u32 side | u32 channels
    | u32 n + n bytes of JSON label map
    | samples * channels * side * side float32 (row-major CHW)
    | samples * u32 labels
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"UFGD"
VERSION = 1
CHANNELS = 3
_HEADER = struct.Struct("<4sIQIII")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_macro: int = 4
    classes_per_macro: int = 8
    samples_per_class: int = 25
    image_side: int = 64
    patch_size: int = 8
    perturbation_amplitude: float = 0.08
    noise_sigma: float = 0.15
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.num_macro * self.classes_per_macro

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, S, S] float32
    labels: np.ndarray  # [N] uint32
    label_names: list[str]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def image_side(self) -> int:
        return int(self.images.shape[-1])


def _label_names(spec: DatasetSpec) -> list[str]:
    return [
        f"macro{m}/class{c}"
        for m in range(spec.num_macro)
        for c in range(spec.classes_per_macro)
    ]


def generate(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Build the (train, val) pair, split 80/20 within every class."""
    if min(spec.num_macro, spec.classes_per_macro, spec.samples_per_class, spec.image_side) < 1:
        raise ValueError("dataset counts and image side must be positive")
    s, p = spec.image_side, spec.patch_size
    if p > s:
        raise ValueError("patch_size cannot exceed image_side")
    rng = np.random.default_rng(spec.seed)

    textures = []
    for _ in range(spec.num_macro):
        field_ = gaussian_filter(
            rng.standard_normal((CHANNELS, s, s)), sigma=(0, s / 16, s / 16), mode="wrap"
        )
        field_ = (field_ - field_.mean()) / field_.std()
        textures.append(0.5 + 0.15 * field_)

    signatures = []
    for _ in range(spec.num_classes):
        y, x = rng.integers(0, s - p + 1, size=2)
        pattern = rng.choice([-1.0, 1.0], size=(CHANNELS, p, p)) * spec.perturbation_amplitude
        signatures.append((int(y), int(x), pattern))

    n_val = int(round(0.2 * spec.samples_per_class))
    train_x, train_y, val_x, val_y = [], [], [], []
    for label in range(spec.num_classes):
        base = textures[label // spec.classes_per_macro].copy()
        y, x, pattern = signatures[label]
        base[:, y:y + p, x:x + p] += pattern
        for i in range(spec.samples_per_class):
            img = base + rng.normal(0.0, spec.noise_sigma, size=base.shape)
            dy, dx = rng.integers(-p, p + 1, size=2)
            img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
            if i < spec.samples_per_class - n_val:
                train_x.append(img)
                train_y.append(label)
            else:
                val_x.append(img)
                val_y.append(label)

    names = _label_names(spec)

    def pack(xs, ys):
        images = np.stack(xs).astype(np.float32) if xs else np.zeros((0, CHANNELS, s, s), np.float32)
        return Dataset(images, np.asarray(ys, dtype=np.uint32), names)

    return pack(train_x, train_y), pack(val_x, val_y)


def to_bytes(ds: Dataset) -> bytes:
    n, ch, s, _ = ds.images.shape
    label_map = json.dumps(ds.label_names).encode()
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, ds.num_classes, s, ch),
        struct.pack("<I", len(label_map)),
        label_map,
        np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
    ]
    return b"".join(parts)


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size + 4:
        raise DatasetFormatError("truncated dataset header")
    magic, version, n, classes, side, ch = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off = _HEADER.size
    (map_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    expected = off + map_len + n * ch * side * side * 4 + n * 4
    if len(buf) != expected:
        raise DatasetFormatError(f"dataset length {len(buf)} bytes, header implies {expected}")
    names = json.loads(buf[off:off + map_len].decode())
    off += map_len
    count = n * ch * side * side
    images = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(n, ch, side, side)
    off += count * 4
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
    if len(names) != classes or (n and int(labels.max()) >= classes):
        raise DatasetFormatError("labels inconsistent with the label map")
    return Dataset(images.astype(np.float32), labels.astype(np.uint32), names)


def write(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def write_split(spec: DatasetSpec, out_dir) -> tuple[Path, Path]:
    """Generate and write ``train.ufgd``, ``val.ufgd`` and the ``spec.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate(spec)
    train_path, val_path = out / "train.ufgd", out / "val.ufgd"
    write(train, train_path)
    write(val, val_path)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return train_path, val_path


def load_split(path) -> tuple[Dataset, Dataset]:
    d = Path(path)
    return load(d / "train.ufgd"), load(d / "val.ufgd")


def epoch_order(n: int, shuffle_seed: int | None, epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(
    ds: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = epoch_order(len(ds), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx].astype(np.int64)
