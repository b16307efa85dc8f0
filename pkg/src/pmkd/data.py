"""Dataset containers, CIFAR binary import, augmentation, minibatching.

The on-disk container (OTFD) is a little-endian binary file:

    magic "OTFD" | version u32 | count u32 | channels u8 | height u16
    | width u16 | num_classes u16 | mean f32[C] | std f32[C]
    | count * (label u16 | C*H*W pixel bytes, channel-major)

Normalization constants live in the header, computed once at import from
the training split, so training runs are self-contained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"OTFD"
_VERSION = 1
_SVHN_COUNTS = {73257, 26032}


class DatasetError(ValueError):
    """Malformed dataset file or container."""


@dataclass
class DatasetContainer:
    images: np.ndarray  # uint8 [count, C, H, W]
    labels: np.ndarray  # uint16 [count]
    num_classes: int
    mean: np.ndarray  # float32 [C], of pixel/255
    std: np.ndarray  # float32 [C]
    version: int = _VERSION

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError("images must be uint8 [count, C, H, W]")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("labels length must match image count")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}")
        if np.any(self.std <= 0):
            raise DatasetError("per-channel std must be positive")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def _record_dtype(self) -> np.dtype:
        return np.dtype([("label", "<u2"),
                         ("pixels", np.uint8, (self.channels * self.height
                                               * self.width,))])

    def save(self, path) -> None:
        c = self.channels
        header = struct.pack("<4sIIBHHH", _MAGIC, self.version, self.count,
                             c, self.height, self.width, self.num_classes)
        header += self.mean.astype("<f4").tobytes()
        header += self.std.astype("<f4").tobytes()
        recs = np.empty(self.count, self._record_dtype())
        recs["label"] = self.labels
        recs["pixels"] = self.images.reshape(self.count, -1)
        Path(path).write_bytes(header + recs.tobytes())

    @classmethod
    def load(cls, path, kind: str | None = None) -> "DatasetContainer":
        raw = Path(path).read_bytes()
        head_fixed = struct.calcsize("<4sIIBHHH")
        if len(raw) < head_fixed:
            raise DatasetError(f"{path}: truncated header ({len(raw)} bytes)")
        magic, version, count, c, h, w, k = struct.unpack_from("<4sIIBHHH", raw)
        if magic != _MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        off = head_fixed
        mean = np.frombuffer(raw, "<f4", c, off).copy()
        off += 4 * c
        std = np.frombuffer(raw, "<f4", c, off).copy()
        off += 4 * c
        rec = 2 + c * h * w
        expected = off + count * rec
        if len(raw) != expected:
            raise DatasetError(f"{path}: file is {len(raw)} bytes, header "
                               f"implies {expected} (count={count})")
        rec_dtype = np.dtype([("label", "<u2"), ("pixels", np.uint8, (c * h * w,))])
        recs = np.frombuffer(raw, rec_dtype, count, off)
        labels = recs["label"].astype(np.uint16)
        images = recs["pixels"].reshape(count, c, h, w).copy()
        if kind == "svhn" and count not in _SVHN_COUNTS:
            raise DatasetError(
                f"{path}: SVHN split must hold 73257 or 26032 records, "
                f"found {count}")
        return cls(images, labels, int(k), mean, std, int(version))


# ---------------------------------------------------------------------------
# CIFAR binary import

_CIFAR = {
    "cifar10": dict(record=3073, label_offset=0, classes=10,
                    train_count=50000, test_count=10000),
    "cifar100": dict(record=3074, label_offset=1, classes=100,
                     train_count=50000, test_count=10000),
}


def _parse_cifar_files(variant: str, files) -> tuple[np.ndarray, np.ndarray]:
    meta = _CIFAR[variant]
    rec = meta["record"]
    images, labels = [], []
    for f in files:
        raw = Path(f).read_bytes()
        if len(raw) % rec:
            raise DatasetError(
                f"{f}: size {len(raw)} is not a multiple of the {rec}-byte "
                f"record; first bad byte at offset {len(raw) - len(raw) % rec}")
        n = len(raw) // rec
        arr = np.frombuffer(raw, np.uint8).reshape(n, rec)
        labels.append(arr[:, meta["label_offset"]].astype(np.uint16))
        images.append(arr[:, rec - 3072:].reshape(n, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def import_cifar(variant: str, train_files, test_files
                 ) -> tuple[DatasetContainer, DatasetContainer]:
    """Parse raw CIFAR binaries into train/test containers.

    CIFAR-100 records carry coarse+fine label bytes; the fine label is
    used. Normalization constants come from the training split and are
    copied into the test container.
    """
    if variant not in _CIFAR:
        raise DatasetError(f"unknown CIFAR variant {variant!r}")
    k = _CIFAR[variant]["classes"]
    tr_img, tr_lab = _parse_cifar_files(variant, train_files)
    te_img, te_lab = _parse_cifar_files(variant, test_files)
    scaled = tr_img.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3)).astype(np.float32)
    std = scaled.std(axis=(0, 2, 3)).astype(np.float32)
    train = DatasetContainer(tr_img, tr_lab, k, mean, std)
    test = DatasetContainer(te_img, te_lab, k, mean.copy(), std.copy())
    return train, test


def subset(container: DatasetContainer, classes=None, per_class=None,
           seed: int = 0, relabel: bool = True) -> DatasetContainer:
    """Deterministic class-filtered, size-limited view of a container."""
    rng = np.random.default_rng(seed)
    if classes is None:
        classes = list(range(container.num_classes))
    picked = []
    for cls in classes:
        idx = np.flatnonzero(container.labels == cls)
        if per_class is not None:
            idx = idx[rng.permutation(len(idx))[:per_class]]
            idx.sort()
        picked.append(idx)
    idx = np.concatenate(picked)
    idx.sort()
    labels = container.labels[idx]
    if relabel:
        remap = {cls: i for i, cls in enumerate(classes)}
        labels = np.array([remap[int(l)] for l in labels], np.uint16)
        k = len(classes)
    else:
        k = container.num_classes
    return DatasetContainer(container.images[idx].copy(), labels, k,
                            container.mean.copy(), container.std.copy())


# ---------------------------------------------------------------------------
# augmentation and batching

@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    pad: int = 4
    crop: tuple[int, int] = (32, 32)
    horizontal_flip_prob: float = 0.5


def default_policy(kind: str | None) -> AugmentPolicy:
    """Pad-crop-flip for CIFAR; nothing for SVHN."""
    return AugmentPolicy(enabled=kind in ("cifar10", "cifar100"))


def augment(image: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """Zero-pad, random-crop, random-flip one [C,H,W] uint8 image."""
    if not policy.enabled:
        return image
    ch, cw = policy.crop
    p = policy.pad
    padded = np.pad(image, ((0, 0), (p, p), (p, p)))
    oy, ox = rng.integers(0, 2 * p + 1, size=2)
    out = padded[:, oy:oy + ch, ox:ox + cw]
    if rng.random() < policy.horizontal_flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def normalize_images(images: np.ndarray, mean: np.ndarray,
                     std: np.ndarray) -> np.ndarray:
    """uint8 [., C, H, W] -> float32, (v/255 - mean)/std per channel."""
    x = images.astype(np.float32) * np.float32(1.0 / 255.0)
    x -= mean.reshape(1, -1, 1, 1)
    x *= (1.0 / std).reshape(1, -1, 1, 1).astype(np.float32)
    return x


def minibatches(container: DatasetContainer, batch_size: int, seed,
                normalize: bool = True, policy: AugmentPolicy | None = None,
                shuffle: bool = True, epoch: int = 0):
    """One epoch of batches, shuffled deterministically from (seed, epoch).

    Yields (x, labels) with x float32 [B,C,H,W] and labels int64; the
    final partial batch is kept. Every record is visited exactly once.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if container.count == 0:
        raise DatasetError("empty container")
    entropy = (*seed, epoch) if isinstance(seed, (tuple, list)) else (seed, epoch)
    rng = np.random.default_rng(entropy)
    order = rng.permutation(container.count) if shuffle \
        else np.arange(container.count)
    for start in range(0, container.count, batch_size):
        idx = order[start:start + batch_size]
        imgs = container.images[idx]
        if policy is not None and policy.enabled:
            imgs = np.stack([augment(im, policy, rng) for im in imgs])
        x = normalize_images(imgs, container.mean, container.std) if normalize \
            else imgs.astype(np.float32)
        yield x, container.labels[idx].astype(np.int64)
