"""Dataset ingestion (IDX files) and synthetic data with deterministic batching.

IDX layout (all integers big-endian):

    offset 0   uint16  zero
    offset 2   uint8   element type (0x08 = unsigned byte; the only type accepted)
    offset 3   uint8   number of dimensions D
    offset 4   uint32  size of dimension 0 (the item count N)
    ...        uint32  sizes of dimensions 1..D-1
    offset 4+4D        N * prod(dims[1:]) raw unsigned bytes, row-major

Image files carry magic 0x00000803 (N x rows x cols); label files carry
0x00000801 (N). Files may be gzip-compressed; this is detected from the
first two bytes, not the filename.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ENV_VAR = "CONDLR_DATA"

# Desk-scale prefix sizes; clipped to what the files actually hold.
DESK_TRAIN_LIMIT = 10000
DESK_TEST_LIMIT = 2000


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    seed: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataError(f"features {x.shape} and labels {y.shape} do not match")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("feature entries must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, index, name=None):
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.num_classes,
                       name or self.name, self.seed)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a uint8 array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    if magic >> 8 != 0x08 or ndim == 0:
        raise IdxMagicError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise IdxMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise IdxTruncatedError(
            f"{path}: payload has {len(raw) - header} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array, compress=None):
    """Write a uint8 array as IDX. Gzip when ``compress`` or the name ends in .gz."""
    a = np.ascontiguousarray(array)
    if a.dtype != np.uint8:
        raise DataError("only unsigned-byte IDX payloads are supported")
    magic = (0x08 << 8) | a.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_mnist_idx(images_path, labels_path, limit=None, num_classes=10, name="mnist"):
    """Load an IDX image/label pair, scaling pixels by 1/255.

    ``limit`` keeps a deterministic prefix of the file (no shuffling), so
    runs at the same limit see the same samples.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, name)


def data_dir(explicit=None):
    """Resolve the data directory: explicit path, then $CONDLR_DATA, then ./data."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_ENV_VAR)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


_SPLIT_PREFIX = {"train": "train", "test": "t10k"}


def load_mnist(split="train", limit=None, root=None):
    """Load ``<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    base = data_dir(root) / "mnist"
    prefix = _SPLIT_PREFIX[split]
    paths = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for candidate in (base / stem, base / f"{stem}.gz"):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise DataError(f"missing MNIST file {base / stem}[.gz]; "
                            f"set ${DATA_ENV_VAR} or run scripts/build_mnist_subset.py")
    return load_mnist_idx(*paths, limit=limit, name=f"mnist-{split}")


def _simplex_centers(num_classes, d):
    # Regular simplex: centred identity rows expressed in an orthonormal basis of
    # their (num_classes - 1)-dimensional span, padded with zeros to d.
    k = num_classes
    centred = np.eye(k) - 1.0 / k
    q, _ = np.linalg.qr(centred.T)
    coords = centred @ q[:, : k - 1]
    out = np.zeros((k, d))
    out[:, : k - 1] = coords
    return out / np.sqrt(2.0)  # unit pairwise distance


def synth_blobs(n_per_class, num_classes, d, separation, seed=0):
    """Gaussian blobs (unit variance) around regular-simplex centres.

    Centres are ``separation`` apart pairwise. The whole array is min-max
    rescaled into [0, 1] with a single affine map, which keeps the blobs
    isotropic.
    """
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    if d < num_classes - 1:
        raise ValueError(f"d={d} cannot host a {num_classes}-point simplex")
    rng = np.random.default_rng(seed)
    centers = separation * _simplex_centers(num_classes, d)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[labels] + rng.standard_normal((labels.size, d))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.full_like(x, 0.5)
    order = rng.permutation(labels.size)
    return Dataset(np.clip(x[order], 0.0, 1.0), labels[order], num_classes,
                   f"blobs-sep{separation:g}", seed)


def split(ds, test_fraction, seed=0):
    """Seeded train/test split of one dataset."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return (ds.subset(np.sort(perm[n_test:]), ds.name + "-train"),
            ds.subset(np.sort(perm[:n_test]), ds.name + "-test"))


def epoch_permutation(n, plan, epoch):
    return np.random.default_rng([plan.seed, epoch]).permutation(n)


def batch_indices(n, plan, epoch):
    perm = epoch_permutation(n, plan, epoch)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [perm[i: i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def batches(ds, plan, epoch) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(X, y)`` minibatches in an order fixed by ``(plan.seed, epoch)``."""
    for idx in batch_indices(len(ds), plan, epoch):
        yield ds.features[idx], ds.labels[idx]


def to_idx_arrays(ds, levels=255):
    """Quantize a [0,1] dataset to the uint8 image/label arrays of an IDX pair."""
    img = np.rint(ds.features * levels).astype(np.uint8)
    return img.reshape(len(ds), 1, ds.dim), ds.labels.astype(np.uint8)
