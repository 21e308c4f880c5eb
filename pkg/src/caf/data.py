"""Datasets: synthetic generators, IDX ingestion, CSV export."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from caf.rng import Stream


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    num_classes: int
    name: str = ""
    # per-point extras, e.g. "signed_distance" for half-plane data
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be (N, d), got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        for key, arr in self.meta.items():
            if len(arr) != len(self.labels):
                raise ValueError(f"metadata {key!r} has wrong length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dimension(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       self.name if name is None else name,
                       {k: v[idx] for k, v in self.meta.items()})


def split_indices(n: int, seed: int, holdout_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split: indices whose hash with ``seed`` ranks lowest are held out."""
    keys = [hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest() for i in range(n)]
    order = sorted(range(n), key=keys.__getitem__)
    n_hold = int(round(holdout_fraction * n))
    held = np.sort(np.array(order[:n_hold], dtype=np.int64))
    kept = np.sort(np.array(order[n_hold:], dtype=np.int64))
    return kept, held


def split(dataset: Dataset, seed: int, holdout_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    kept, held = split_indices(len(dataset), seed, holdout_fraction)
    return dataset.subset(kept), dataset.subset(held)


def _spread_directions(count: int, dimension: int, stream: Stream, tries: int = 16) -> np.ndarray:
    # best of several random draws by minimum pairwise distance
    best, best_gap = None, -1.0
    for t in range(tries):
        g = stream.child(str(t)).normal((count, dimension))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        if count > 1:
            gaps = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
            gap = float(gaps[np.triu_indices(count, 1)].min())
        else:
            gap = 0.0
        if gap > best_gap:
            best, best_gap = g, gap
    return best


def make_blobs(num_classes: int, points_per_class: int, dimension: int, center_separation: float,
               spread: float | Sequence[float], seed: int) -> Dataset:
    """Gaussian blobs around class centers on a sphere of radius ``center_separation``.

    ``spread`` is the per-coordinate standard deviation, either one value or
    one per class. Points are ordered class by class.
    """
    if min(num_classes, points_per_class, dimension) < 1:
        raise ValueError("counts and dimension must be positive")
    spreads = np.broadcast_to(np.asarray(spread, dtype=np.float64), (num_classes,))
    if center_separation <= 0 or np.any(spreads <= 0):
        raise ValueError("center_separation and spread must be positive")
    root = Stream(seed, ("blobs",))
    centers = center_separation * _spread_directions(num_classes, dimension, root.child("centers"))
    inputs, labels = [], []
    for c in range(num_classes):
        noise = root.child("points").child(str(c)).normal((points_per_class, dimension))
        inputs.append(centers[c] + spreads[c] * noise)
        labels.append(np.full(points_per_class, c))
    ds = Dataset(np.concatenate(inputs), np.concatenate(labels), num_classes, "blobs")
    ds.meta["center"] = np.repeat(centers, points_per_class, axis=0)
    return ds


def make_half_plane(num_points: int, dimension: int, w, b: float, band: float, seed: int,
                    box: float = 1.0) -> Dataset:
    """Uniform points in ``[-box, box]^d`` labeled 1 where ``w.x + b > 0``, else 0.

    Points closer than ``band`` to the boundary are redrawn. The signed
    distance ``(w.x + b) / |w|`` of every point is kept in ``meta``.
    """
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if w.shape != (dimension,) or not norm > 0:
        raise ValueError(f"w must be a non-zero vector of length {dimension}")
    gen = Stream(seed, ("half_plane",))
    kept = np.empty((0, dimension))
    rounds = 0
    while len(kept) < num_points:
        cand = box * (2.0 * gen.uniform((2 * num_points, dimension)) - 1.0)
        dist = (cand @ w + b) / norm
        kept = np.concatenate([kept, cand[np.abs(dist) >= band]])
        rounds += 1
        if rounds > 1000:
            raise ValueError("band leaves no room inside the sampling box")
    x = kept[:num_points]
    dist = (x @ w + b) / norm
    ds = Dataset(x, (dist > 0).astype(np.int64), 2, "half_plane")
    ds.meta["signed_distance"] = dist
    return ds


# IDX files


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the magic number")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim < 1:
        raise IdxMagicError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Images flattened to vectors with pixels scaled to [0, 1], plus their labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxMagicError(f"{labels_path}: label file must be one-dimensional")
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if len(labels) else 2)
    return Dataset(inputs, labels, num_classes, Path(images_path).stem)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# CSV


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{i}" for i in range(dataset.dimension)])
        for y, x in zip(dataset.labels, dataset.inputs):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ValueError(f"{path}: expected a 'label,x0,...' header")
    body = rows[1:]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    inputs = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if len(labels) else 2)
    return Dataset(inputs, labels, num_classes, Path(path).stem)
