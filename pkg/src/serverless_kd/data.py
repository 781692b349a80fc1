"""Datasets, public subsets and Dirichlet non-IID partitioning."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class InvalidAlpha(DataError):
    pass


class SizeOutOfRange(DataError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError("features and labels differ in length")
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")
        features = np.asarray(self.features, dtype=np.float64)
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, indices, name: str | None = None) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, name or self.name)

    def split(self, fraction: float, seed) -> tuple[LabeledDataset, LabeledDataset]:
        """Random ``(1 - fraction, fraction)`` split."""
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - max(1, int(round(fraction * len(self))))
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]), f"{self.name}-holdout")


@dataclass(frozen=True)
class PartitionPlan:
    alpha: float
    seed: int
    client_indices: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def class_counts(self, labels, num_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[ix], minlength=num_classes) for ix in self.client_indices])


def dirichlet_partition(labels, n_clients: int, alpha: float, seed) -> PartitionPlan:
    """Split sample indices across clients with per-class Dirichlet(alpha) proportions.

    For every class the (shuffled) indices of that class are cut according to
    proportions drawn from ``Dirichlet(alpha * 1_n)``. A client left empty
    afterwards receives the highest index of the currently largest client.
    """
    if not alpha > 0:
        raise InvalidAlpha(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise DataError("need at least one client")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < n_clients:
        raise DataError(f"cannot give {n_clients} clients a sample each from {len(labels)} samples")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    for b in buckets:
        b.sort()
    for client in range(n_clients):
        if not buckets[client]:
            donor = max(range(n_clients), key=lambda c: (len(buckets[c]), -c))
            buckets[client].append(buckets[donor].pop())
    return PartitionPlan(float(alpha), seed, tuple(np.sort(np.asarray(b, dtype=np.int64)) for b in buckets))


def public_subset(dataset_size: int | LabeledDataset, size: int, seed) -> np.ndarray:
    """Uniform sample of ``size`` indices without replacement."""
    n = len(dataset_size) if isinstance(dataset_size, LabeledDataset) else int(dataset_size)
    if not 1 <= size <= n:
        raise SizeOutOfRange(f"subset size {size} outside [1, {n}]")
    return np.random.default_rng(seed).choice(n, size=size, replace=False)


# ---------------------------------------------------------------------------
# loading


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def synthetic_blobs(spec: dict[str, Any], name: str = "synthetic") -> LabeledDataset:
    """Gaussian class blobs squashed into (0, 1) by the logistic function.

    The squashing is a fixed map rather than a per-dataset rescale, so specs
    that share centers (same ``seed``) share one feature space.

    Keys: ``classes``, ``dim`` (int or shape list), ``samples_per_class``,
    ``spread`` (per-coordinate standard deviation) and ``seed``. Optional
    ``center_scale`` (default 1.0) scales the standard-normal class centers,
    and ``sample_seed`` (default ``seed``) drives the per-sample noise, so two
    specs sharing ``seed`` draw different samples around the same centers.
    """
    try:
        classes = int(spec["classes"])
        dim = spec["dim"]
        per_class = int(spec["samples_per_class"])
        spread = float(spec["spread"])
        seed = int(spec["seed"])
    except KeyError as exc:
        raise FormatError(f"synthetic spec is missing {exc.args[0]!r}") from exc
    shape = (int(dim),) if isinstance(dim, int) else tuple(int(d) for d in dim)
    if classes < 1 or per_class < 1 or spread < 0 or min(shape) < 1:
        raise FormatError(f"invalid synthetic spec {spec!r}")
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    centers = rng.normal(0.0, float(spec.get("center_scale", 1.0)), size=(classes, d))
    if spec.get("sample_seed") is not None:
        rng = np.random.default_rng([int(spec["sample_seed"]), 1])
    labels = np.repeat(np.arange(classes), per_class)
    feats = centers[labels] + spread * rng.normal(size=(len(labels), d))
    perm = rng.permutation(len(labels))
    squashed = 1.0 / (1.0 + np.exp(-feats[perm]))
    return LabeledDataset(squashed.reshape((-1, *shape)), labels[perm], classes, name)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path) -> np.ndarray:
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    code, ndim = raw[2], raw[3]
    if code not in dtypes or ndim == 0:
        raise FormatError(f"{path}: unsupported IDX type 0x{code:02x} / ndim {ndim}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dt = np.dtype(dtypes[code])
    payload = raw[4 + 4 * ndim :]
    if len(payload) != int(np.prod(dims)) * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match header dims {dims}")
    return np.frombuffer(payload, dtype=dt).reshape(dims)


def _labels_path(images: Path) -> Path:
    name = images.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return images.with_name(name.replace(a, b))
    raise DataError(f"cannot derive a label file name from {images}; pass labels_path")


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (used for fixtures)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_dataset(path, format: str = "idx", *, labels_path=None, num_classes: int | None = None, name=None):
    """Load an IDX pair, a CSV file (``label,f0,f1,...``) or a synthetic spec.

    For ``format="synthetic"`` pass the spec mapping as ``path``.
    Features are scaled to [0, 1].
    """
    if format == "synthetic":
        if not isinstance(path, dict):
            raise FormatError("synthetic datasets take a spec mapping")
        return synthetic_blobs(path, name or "synthetic")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "idx":
        images = _read_idx(path)
        labels = _read_idx(Path(labels_path) if labels_path else _labels_path(path)).astype(np.int64)
        if labels.ndim != 1 or len(labels) != len(images):
            raise FormatError("label file must be 1-D and match the image count")
        feats = images.astype(np.float64)
        feats = feats / 255.0 if images.dtype == np.uint8 else _minmax(feats)
        if feats.ndim == 3:
            feats = feats[..., None]
    elif format == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
                raise FormatError(f"{path}: header must be 'label,f0,f1,...'")
            rows = list(reader)
        try:
            table = np.asarray(rows, dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric or ragged rows") from exc
        if table.ndim != 2 or table.shape[1] != len(header):
            raise FormatError(f"{path}: rows do not match the header")
        labels = table[:, 0]
        if not np.all(labels == np.round(labels)):
            raise FormatError(f"{path}: labels must be integers")
        labels = labels.astype(np.int64)
        feats = _minmax(table[:, 1:])
    else:
        raise FormatError(f"unknown dataset format {format!r}")
    if len(labels) and labels.min() < 0:
        raise LabelOutOfRange("negative label")
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(feats, labels, classes, name or os.path.basename(str(path)))
