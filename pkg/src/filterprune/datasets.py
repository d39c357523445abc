"""Small labelled image datasets stored in the shared binary container.

A dataset file holds raw uint8 images (N, C, H, W), integer labels and
the source index of every image for each split, plus per-channel mean and
std of the train split (of the parent's train split for class subsets).
Loading normalizes with those statistics.
"""

from __future__ import annotations

import gzip
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, find_section, pack_section, read_container, unpack_section, write_container


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # float (N, C, H, W), normalized
    labels: np.ndarray  # int64 (N,)
    split: str
    class_names: list[str]
    indices: np.ndarray = None  # source index of every image
    parent_classes: list[int] | None = None  # subset label -> parent label

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.labels), dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.indices) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images, {len(self.labels)} labels, {len(self.indices)} indices")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.images[rows], self.labels[rows], self.split, self.class_names,
                       self.indices[rows], self.parent_classes)

    def astype(self, dtype) -> Dataset:
        return Dataset(self.images.astype(dtype), self.labels, self.split, self.class_names,
                       self.indices, self.parent_classes)

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class ClassSubsetSpec:
    parent: str
    class_ids: list[int]
    name: str = ""

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        if not self.name:
            self.name = f"{self.parent}-{len(self.class_ids)}"


@dataclass
class RawSplits:
    """Un-normalized contents of a dataset file."""

    name: str
    class_names: list[str]
    splits: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    parent_classes: list[int] | None = None
    norm: tuple[np.ndarray, np.ndarray] | None = None  # per-channel (mean, std); from train when None


# generation and ingestion ---------------------------------------------------


def synthetic_images(seed: int, n_images: int = 1000, n_classes: int = 10, shape=(1, 16, 16),
                     noise: float = 0.35, shift: int = 2):
    """Seeded class-prototype images: smooth random patterns, jittered and noisy.

    Returns ``(images uint8 (N, C, H, W), labels int64 (N,))``.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    protos = np.zeros((n_classes, c, h, w))
    for k in range(n_classes):
        for ch in range(c):
            img = np.zeros((h, w))
            for _ in range(3):
                cy, cx = rng.uniform(0.15, 0.85, size=2)
                sy, sx = rng.uniform(0.08, 0.25, size=2)
                img += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2)))
            theta, freq = rng.uniform(0, np.pi), rng.uniform(2, 5)
            img += 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
            protos[k, ch] = img
    labels = np.arange(n_images) % n_classes
    labels = rng.permutation(labels)
    images = np.empty((n_images, c, h, w))
    for i, k in enumerate(labels):
        dy, dx = rng.integers(-shift, shift + 1, size=2)
        img = np.roll(protos[k], (dy, dx), axis=(1, 2)) * rng.uniform(0.7, 1.3)
        images[i] = img + rng.normal(0, noise, size=(c, h, w))
    lo, hi = np.percentile(images, [0.5, 99.5])
    images = np.clip((images - lo) / (hi - lo), 0, 1)
    return np.round(images * 255).astype(np.uint8), labels.astype(np.int64)


def split_indices(n: int, eval_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = int(round(n * eval_fraction))
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def make_synthetic(seed: int = 0, n_images: int = 1000, n_classes: int = 10, shape=(1, 16, 16),
                   eval_fraction: float = 0.2, **kwargs) -> RawSplits:
    images, labels = synthetic_images(seed, n_images, n_classes, shape, **kwargs)
    train, test = split_indices(n_images, eval_fraction, seed + 1)
    return RawSplits(
        f"synthetic-{seed}",
        [f"class{k}" for k in range(n_classes)],
        {"train": (images[train], labels[train], train), "eval": (images[test], labels[test], test)},
    )


def make_digits(eval_fraction: float = 0.25, seed: int = 0) -> RawSplits:
    """The 8x8 handwritten digits bundled with scikit-learn (1797 images)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.round(d.images * (255 / 16)).astype(np.uint8)[:, None]
    labels = d.target.astype(np.int64)
    train, test = split_indices(len(labels), eval_fraction, seed)
    return RawSplits(
        "digits", [str(k) for k in range(10)],
        {"train": (images[train], labels[train], train), "eval": (images[test], labels[test], test)},
    )


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise DatasetError(f"missing file {path}")


def _idx_array(raw: bytes, what: str) -> np.ndarray:
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 8:
        raise DatasetError(f"{what}: not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"{what}: expected {int(np.prod(dims))} values, found {body.size}")
    return body.reshape(dims)


def ingest_mnist(directory) -> RawSplits:
    """Convert the four MNIST IDX files (optionally gzipped) in ``directory``."""
    d = Path(directory)
    splits = {}
    for split, prefix in (("train", "train"), ("eval", "t10k")):
        images = _idx_array(_read_maybe_gz(d / f"{prefix}-images-idx3-ubyte"), f"{prefix} images")
        labels = _idx_array(_read_maybe_gz(d / f"{prefix}-labels-idx1-ubyte"), f"{prefix} labels")
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise DatasetError(f"{prefix}: image shape {images.shape} and label shape {labels.shape} disagree")
        offset = 0 if split == "train" else 10**7
        splits[split] = (images[:, None].copy(), labels.astype(np.int64), np.arange(len(labels)) + offset)
    return RawSplits("mnist", [str(k) for k in range(10)], splits)


def ingest_cifar10(directory) -> RawSplits:
    """Convert the CIFAR-10 python pickle batches in ``directory``."""
    d = Path(directory)

    def batch(name):
        path = d / name
        if not path.exists():
            raise DatasetError(f"missing file {path}")
        with open(path, "rb") as f:
            entry = pickle.load(f, encoding="bytes")
        data = np.asarray(entry[b"data"], dtype=np.uint8)
        if data.ndim != 2 or data.shape[1] != 3072:
            raise DatasetError(f"{name}: data shape {data.shape}, expected (N, 3072)")
        return data.reshape(-1, 3, 32, 32), np.asarray(entry[b"labels"], dtype=np.int64)

    parts = [batch(f"data_batch_{k}") for k in range(1, 6) if (d / f"data_batch_{k}").exists()]
    if not parts:
        raise DatasetError(f"no data_batch_* files in {d}")
    tr_x = np.concatenate([p[0] for p in parts])
    tr_y = np.concatenate([p[1] for p in parts])
    te_x, te_y = batch("test_batch")
    names = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
    return RawSplits("cifar10", names, {
        "train": (tr_x, tr_y, np.arange(len(tr_y))),
        "eval": (te_x, te_y, np.arange(len(te_y)) + 10**7),
    })


# storage ----------------------------------------------------------------------


def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def dataset_bytes(raw: RawSplits) -> bytes:
    if "train" not in raw.splits:
        raise DatasetError("a dataset file needs a train split")
    seen = set()
    for split, (_, _, idx) in raw.splits.items():
        if seen & set(idx.tolist()):
            raise DatasetError(f"split {split!r} overlaps an earlier split")
        seen |= set(idx.tolist())
    mean, std = raw.norm if raw.norm is not None else channel_stats(raw.splits["train"][0])
    arrays = {"norm/mean": mean, "norm/std": std}
    for split, (images, labels, idx) in raw.splits.items():
        arrays[f"{split}/images"] = np.asarray(images, dtype=np.uint8)
        arrays[f"{split}/labels"] = np.asarray(labels, dtype=np.int64)
        arrays[f"{split}/indices"] = np.asarray(idx, dtype=np.int64)
    meta = {"name": raw.name, "class_names": list(raw.class_names), "splits": list(raw.splits),
            "parent_classes": raw.parent_classes}
    return write_container([("DSET", pack_section(meta, arrays))])


def read_raw(data: bytes) -> RawSplits:
    meta, arrays = unpack_section(find_section(read_container(data), "DSET"))
    raw = RawSplits(meta["name"], meta["class_names"], parent_classes=meta.get("parent_classes"),
                    norm=(arrays["norm/mean"], arrays["norm/std"]))
    for split in meta["splits"]:
        images = arrays[f"{split}/images"]
        if images.ndim != 4:
            raise DatasetError(f"{split}/images has shape {images.shape}, expected (N, C, H, W)")
        raw.splits[split] = (images, arrays[f"{split}/labels"], arrays[f"{split}/indices"])
    return raw


def save_dataset(raw: RawSplits, path):
    Path(path).write_bytes(dataset_bytes(raw))


def load_dataset(path, split: str = "train", dtype=np.float32) -> Dataset:
    """Load one split, normalized by the stored per-channel statistics.

    Those are the train split's statistics, or the parent's for a class subset.
    """
    try:
        raw = read_raw(Path(path).read_bytes())
    except FileNotFoundError:
        raise DatasetError(f"no dataset file at {path}") from None
    except CheckpointError as e:
        raise DatasetError(f"{path}: {e}") from e
    if split not in raw.splits:
        raise DatasetError(f"{path} has splits {list(raw.splits)}, not {split!r}")
    images, labels, idx = raw.splits[split]
    mean, std = raw.norm
    if len(mean) != images.shape[1]:
        raise DatasetError(f"normalization has {len(mean)} channels, images have {images.shape[1]}")
    x = (images.astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(x.astype(dtype), labels, split, list(raw.class_names), idx, raw.parent_classes)


def build_class_subset(dataset: Dataset, spec: ClassSubsetSpec) -> Dataset:
    """Keep images of ``spec.class_ids`` and relabel them 0..l-1 in the given order."""
    ids = spec.class_ids
    if not ids:
        raise DatasetError("class subset is empty")
    if len(set(ids)) != len(ids):
        raise DatasetError(f"class ids {ids} are not distinct")
    if min(ids) < 0 or max(ids) >= dataset.class_count:
        raise DatasetError(f"class ids {ids} outside [0, {dataset.class_count})")
    lookup = np.full(dataset.class_count, -1, dtype=np.int64)
    lookup[ids] = np.arange(len(ids))
    rows = np.flatnonzero(lookup[dataset.labels] >= 0)
    if len(rows) == 0:
        raise DatasetError(f"split {dataset.split!r} has no images of classes {ids}")
    parent = dataset.parent_classes
    mapping = [parent[c] for c in ids] if parent is not None else list(ids)
    return Dataset(dataset.images[rows], lookup[dataset.labels[rows]], dataset.split,
                   [dataset.class_names[c] for c in ids], dataset.indices[rows], mapping)


def subset_raw(raw: RawSplits, spec: ClassSubsetSpec) -> RawSplits:
    """Class subset applied to every split of a dataset file."""
    ids = spec.class_ids
    if not ids or len(set(ids)) != len(ids) or min(ids) < 0 or max(ids) >= len(raw.class_names):
        raise DatasetError(f"invalid class ids {ids}")
    lookup = np.full(len(raw.class_names), -1, dtype=np.int64)
    lookup[ids] = np.arange(len(ids))
    out = RawSplits(spec.name, [raw.class_names[c] for c in ids],
                    parent_classes=[raw.parent_classes[c] for c in ids] if raw.parent_classes else list(ids),
                    norm=raw.norm if raw.norm is not None else channel_stats(raw.splits["train"][0]))
    for split, (images, labels, idx) in raw.splits.items():
        rows = np.flatnonzero(lookup[labels] >= 0)
        out.splits[split] = (images[rows], lookup[labels[rows]], idx[rows])
    if len(out.splits["train"][1]) == 0:
        raise DatasetError(f"no training images of classes {ids}")
    return out
