"""Desk-scale datasets, two-view batching and file loaders (IDX, CSV)."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # n x feature-shape, float64
    labels: np.ndarray  # n int64 in [0, num_classes)
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test indices overlap")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.test_idx], self.labels[self.test_idx]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features.astype("<f8"), self.labels.astype("<i8"),
                    self.train_idx.astype("<i8"), self.test_idx.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class ViewBatch:
    features: np.ndarray  # (views * N) x feature-shape
    labels: np.ndarray
    origin: np.ndarray  # dataset index each row was produced from

    def __len__(self) -> int:
        return len(self.labels)


def _split(labels: np.ndarray, rng: np.random.Generator, test_fraction: float = 1 / 3):
    """Stratified split, 2:1 train:test by default."""
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(len(idx) * test_fraction))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _class_means(classes: int, dim: int, min_dist: float, rng: np.random.Generator) -> np.ndarray:
    if classes <= dim:
        # scaled simplex vertices e_c, randomly rotated; pairwise distance = min_dist
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return (min_dist / np.sqrt(2.0)) * q[:, :classes].T
    means = rng.normal(size=(classes, dim))
    d = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
    closest = d[~np.eye(classes, dtype=bool)].min()
    return means * (min_dist / closest)


def gen_blobs(classes: int, dim: int, per_class: int, spread: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs; class means are at least 6 * spread apart."""
    if classes < 2 or dim < 1 or per_class < 1 or not spread > 0:
        raise ValueError(f"invalid blob parameters: classes={classes} dim={dim} per_class={per_class} spread={spread}")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, 6.0 * spread, rng)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + spread * rng.normal(size=(labels.size, dim))
    train, test = _split(labels, rng)
    prov = {"generator": "blobs", "classes": classes, "dim": dim, "per_class": per_class,
            "spread": spread, "seed": seed}
    ds = Dataset(x, labels, train, test, classes, prov)
    ds.provenance["checksum"] = ds.checksum()
    return ds


def gen_images(classes: int, channels: int = 3, size: int = 8, per_class: int = 20,
               noise: float = 0.1, seed: int = 0) -> Dataset:
    """Tiny labelled images: one random template per class plus pixel noise, clipped to [0, 1]."""
    if classes < 2 or channels < 1 or size < 1 or per_class < 1 or noise < 0:
        raise ValueError("invalid image generator parameters")
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes, channels, size, size))
    labels = np.repeat(np.arange(classes), per_class)
    x = np.clip(templates[labels] + noise * rng.normal(size=(labels.size, channels, size, size)), 0.0, 1.0)
    train, test = _split(labels, rng)
    prov = {"generator": "images", "classes": classes, "channels": channels, "size": size,
            "per_class": per_class, "noise": noise, "seed": seed}
    ds = Dataset(x, labels, train, test, classes, prov)
    ds.provenance["checksum"] = ds.checksum()
    return ds


def two_view_augment(features: np.ndarray, labels: np.ndarray, origin: Optional[np.ndarray] = None,
                     noise: float = 0.0, seed=0, flip: bool = True) -> ViewBatch:
    """Emit every sample twice with independent jitter; image tensors may also be mirrored.

    Output order is ``[view1 of all N, view2 of all N]`` so the batch has 2N rows.
    """
    if noise < 0:
        raise ValueError("augmentation noise must be non-negative")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    origin = np.arange(len(labels)) if origin is None else np.asarray(origin)
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(2):
        v = features + (noise * rng.normal(size=features.shape) if noise > 0 else 0.0)
        if flip and features.ndim == 4:
            mirror = rng.random(len(v)) < 0.5
            v = np.where(mirror[:, None, None, None], v[..., ::-1], v)
        views.append(v)
    return ViewBatch(np.concatenate(views), np.concatenate([labels, labels]), np.concatenate([origin, origin]))


def batches(ds: Dataset, batch_size: int, seed=0, epoch: int = 0, views: int = 1,
            aug_noise: float = 0.0) -> Iterator[ViewBatch]:
    """Shuffled training mini-batches for one epoch.

    The permutation depends only on ``(seed, epoch)``. A short final batch is
    kept when it has at least two samples.
    """
    if views not in (1, 2):
        raise ValueError(f"views must be 1 or 2, got {views}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = ds.train_idx[rng.permutation(len(ds.train_idx))]
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2 and start > 0:
            break
        x, y = ds.features[idx], ds.labels[idx]
        if views == 2:
            yield two_view_augment(x, y, idx, aug_noise, seed=[int(seed), int(epoch), start])
        else:
            yield ViewBatch(x, y, idx)


# ---------------------------------------------------------------------------
# loaders


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims))
    if len(raw) - hdr < n:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - hdr} bytes, header promises {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, test_fraction: float = 1 / 3, seed: int = 0) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    classes = int(labels.max()) + 1 if labels.size else 0
    train, test = _split(labels, np.random.default_rng(seed), test_fraction)
    prov = {"loader": "idx", "images": str(images_path), "labels": str(labels_path),
            "sha256": hashlib.sha256(Path(images_path).read_bytes() + Path(labels_path).read_bytes()).hexdigest()}
    return Dataset(x, labels, train, test, max(classes, 1), prov)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.size) + labels.tobytes())


def load_csv(path, label_column: str, test_fraction: float = 1 / 3, seed: int = 0) -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if label_column not in header:
        raise DataFormatError(f"{path}: label column {label_column!r} not found in header {header}")
    li = header.index(label_column)
    feats, labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: ragged row with {len(row)} cells, header has {len(header)}")
        try:
            values = [float(c) for c in row]
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({e})") from None
        lab = values.pop(li)
        if lab != int(lab) or lab < 0:
            raise DataFormatError(f"{path}:{lineno}: label {lab} is not a class id")
        labels.append(int(lab))
        feats.append(values)
    if not labels:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    x = np.array(feats, dtype=np.float64).reshape(len(labels), len(header) - 1)
    if len(y) == 1:
        train, test = np.array([0]), np.array([], dtype=np.int64)
    else:
        train, test = _split(y, np.random.default_rng(seed), test_fraction)
    prov = {"loader": "csv", "path": str(path), "label_column": label_column,
            "sha256": hashlib.sha256(Path(path).read_bytes()).hexdigest()}
    return Dataset(x, y, train, test, int(y.max()) + 1, prov)


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``<path>.npz`` plus a ``<path>.json`` provenance sidecar; returns the npz path."""
    path = Path(path)
    npz = path.with_suffix(".npz")
    np.savez(npz, features=ds.features, labels=ds.labels, train_idx=ds.train_idx,
             test_idx=ds.test_idx, num_classes=ds.num_classes)
    sidecar = dict(ds.provenance, checksum=ds.checksum(), n=len(ds), feature_shape=list(ds.feature_shape))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return npz


def load_dataset(path) -> Dataset:
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as z:
        ds = Dataset(z["features"], z["labels"], z["train_idx"], z["test_idx"], int(z["num_classes"]))
    side = path.with_suffix(".json")
    if side.exists():
        ds.provenance = json.loads(side.read_text())
    return ds
