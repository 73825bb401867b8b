"""Candidate pools and validation anchors.

Randomness is drawn from named PCG64 streams derived from one integer seed,
so that e.g. the label-noise stream does not shift when the number of
feature draws changes.
"""

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    EmptyDataset,
    IdOverlap,
    InvalidRate,
    TooSmallForStratification,
    TruncatedFile,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_POOL_SIZE = 55_000


def rng_stream(seed, purpose):
    """Independent PCG64 generator for ``(seed, purpose)``.

    The purpose string is folded into the seed sequence through CRC32, which
    (unlike ``hash``) is stable across interpreter runs.
    """
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    num_classes: int
    corrupted: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {X.shape}")
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        ids = np.asarray(self.sample_ids, dtype=np.int64).ravel()
        n = X.shape[0]
        if y.size != n or ids.size != n:
            raise CountMismatch(
                f"{n} feature rows, {y.size} labels, {ids.size} ids"
            )
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.unique(ids).size != n:
            raise ValueError("sample_ids must be unique")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "sample_ids", _frozen(ids))
        if self.corrupted is not None:
            c = np.asarray(self.corrupted, dtype=bool).ravel()
            if c.size != n:
                raise CountMismatch(f"{c.size} corruption flags for {n} samples")
            object.__setattr__(self, "corrupted", _frozen(c))

    def __len__(self):
        return self.features.shape[0]

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def take(self, rows):
        """Sub-dataset of the given row positions, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            self.features[rows],
            self.labels[rows],
            self.sample_ids[rows],
            self.num_classes,
            None if self.corrupted is None else self.corrupted[rows],
        )

    def rows_of(self, ids):
        """Row positions of the given sample ids."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        order = np.argsort(self.sample_ids, kind="stable")
        pos = np.searchsorted(self.sample_ids[order], ids)
        pos = np.clip(pos, 0, self.n - 1)
        found = self.sample_ids[order][pos] == ids
        if not np.all(found):
            raise KeyError(f"sample ids not in dataset: {ids[~found][:5].tolist()}")
        return order[pos]

    def select_ids(self, ids):
        """Sub-dataset holding ``ids``, kept in this dataset's row order."""
        mask = np.isin(self.sample_ids, np.asarray(ids, dtype=np.int64))
        return self.take(np.flatnonzero(mask))

    def sample(self, sample_id):
        return self.take(self.rows_of([sample_id]))

    def without(self, sample_id):
        keep = self.sample_ids != sample_id
        if keep.all():
            raise KeyError(f"sample id {sample_id} not in dataset")
        return self.take(np.flatnonzero(keep))

    def with_labels(self, labels):
        return LabeledDataset(
            self.features, labels, self.sample_ids, self.num_classes, self.corrupted
        )

    def with_features(self, features):
        return LabeledDataset(
            features, self.labels, self.sample_ids, self.num_classes, self.corrupted
        )


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """A dataset role-tagged as the validation anchor."""

    data: LabeledDataset
    strategy: str
    seed: int

    def __len__(self):
        return len(self.data)


def as_dataset(obj):
    return obj.data if isinstance(obj, AnchorSet) else obj


def check_disjoint(pool, anchor):
    shared = np.intersect1d(as_dataset(pool).sample_ids, as_dataset(anchor).sample_ids)
    if shared.size:
        raise IdOverlap(f"{shared.size} sample ids shared by pool and anchor")


def _cluster_means(K, d, separation, rng):
    if d >= K:
        # simplex corners: every pair of means sits exactly `separation` apart
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return (separation / np.sqrt(2.0)) * Q[:, :K].T
    means = rng.standard_normal((K, d))
    diffs = means[:, None, :] - means[None, :, :]
    iu = np.triu_indices(K, 1)
    mean_dist = np.linalg.norm(diffs, axis=-1)[iu].mean()
    return means * (separation / mean_dist)


def corrupt_labels(data, noise_rate, seed):
    """Flip exactly ``round(noise_rate * N)`` labels to a uniformly drawn wrong class."""
    if not 0.0 <= noise_rate <= 1.0:
        raise InvalidRate(f"noise_rate must lie in [0, 1], got {noise_rate}")
    rng = rng_stream(seed, "noise")
    n, K = data.n, data.num_classes
    n_flip = int(round(noise_rate * n))
    rows = np.sort(rng.choice(n, size=n_flip, replace=False))
    labels = data.labels.copy()
    labels[rows] = (labels[rows] + rng.integers(1, K, size=n_flip)) % K
    flags = np.zeros(n, dtype=bool) if data.corrupted is None else data.corrupted.copy()
    flags[rows] = True
    return LabeledDataset(data.features, labels, data.sample_ids, K, flags)


def generate_mixture(K, N, d, separation, noise_rate, seed, id_offset=0):
    """Balanced Gaussian mixture with unit-variance clusters.

    Features are standardized per dimension after sampling. A fraction
    ``noise_rate`` of labels is then flipped (see :func:`corrupt_labels`).
    """
    if K < 2:
        raise ValueError("need at least two classes")
    if N < K:
        raise ValueError(f"N={N} is smaller than the number of classes K={K}")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if not 0.0 <= noise_rate <= 1.0:
        raise InvalidRate(f"noise_rate must lie in [0, 1], got {noise_rate}")
    rng = rng_stream(seed, "data")
    means = _cluster_means(K, d, separation, rng)
    labels = rng.permutation(np.arange(N) % K)
    X = means[labels] + rng.standard_normal((N, d))
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    ids = np.arange(id_offset, id_offset + N)
    clean = LabeledDataset(X, labels, ids, K, np.zeros(N, dtype=bool))
    return corrupt_labels(clean, noise_rate, seed)


def build_anchor(source, size, strategy="stratified", seed=0):
    """Draw a validation anchor from ``source``.

    Returns ``(anchor, residual)``, where ``residual`` is ``source`` with the
    anchor ids removed. Stratified draws take ``size // K`` per class and hand
    the remainder to the most populous classes.
    """
    source = as_dataset(source)
    n, K = source.n, source.num_classes
    if size < 1 or size > n:
        raise ValueError(f"anchor size {size} outside [1, {n}]")
    rng = rng_stream(seed, "anchor")
    if strategy == "uniform":
        rows = rng.choice(n, size=size, replace=False)
    elif strategy == "stratified":
        if size < K:
            raise TooSmallForStratification(f"size {size} < number of classes {K}")
        counts = np.bincount(source.labels, minlength=K)
        quota = np.full(K, size // K)
        by_size = sorted(range(K), key=lambda k: (-counts[k], k))
        for k in by_size[: size % K]:
            quota[k] += 1
        if np.any(quota > counts):
            k = int(np.argmax(quota - counts))
            raise TooSmallForStratification(
                f"class {k} has {counts[k]} samples, needs {quota[k]}"
            )
        rows = np.concatenate(
            [
                rng.choice(np.flatnonzero(source.labels == k), size=quota[k], replace=False)
                for k in range(K)
            ]
        )
    else:
        raise ValueError(f"unknown anchor strategy {strategy!r}")
    mask = np.zeros(n, dtype=bool)
    mask[rows] = True
    anchor = AnchorSet(source.take(np.flatnonzero(mask)), strategy, int(seed))
    residual = source.take(np.flatnonzero(~mask))
    return anchor, residual


def split(data, sizes, seed, purpose="split"):
    """Partition ``data`` into consecutive random parts of the given sizes.

    The last part receives whatever remains. Each part keeps the original
    row order.
    """
    perm = rng_stream(seed, purpose).permutation(data.n)
    parts, start = [], 0
    for size in list(sizes) + [data.n - sum(sizes)]:
        rows = np.sort(perm[start : start + size])
        parts.append(data.take(rows))
        start += size
    return parts


# IDX format


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, no IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFile(
            f"{path}: expected {count} data bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit=None, num_classes=None):
    """Load an MNIST-style IDX image/label pair.

    Pixels are scaled to [0, 1] and flattened row-major. ``limit`` keeps the
    first ``limit`` samples in file order (the MNIST pool uses 55000).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise EmptyDataset("IDX files contain no samples")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    K = int(num_classes) if num_classes else max(2, int(y.max()) + 1)
    return LabeledDataset(X, y, np.arange(y.size), K)


def write_idx(data, images_path, labels_path, shape=(28, 28)):
    """Write ``data`` back to IDX; features are rescaled to bytes by ``round(255*x)``."""
    n = data.n
    if int(np.prod(shape)) != data.d:
        raise ValueError(f"image shape {shape} does not match feature dim {data.d}")
    pixels = np.clip(np.rint(data.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", n, *shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


# CSV


def write_csv(data, path, comment=None):
    """Serialize as ``id,label,corrupted,f0..f{d-1}``; floats use ``repr`` to round-trip."""
    corrupted = data.corrupted if data.corrupted is not None else np.zeros(data.n, bool)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "corrupted"] + [f"f{j}" for j in range(data.d)])
        for i in range(data.n):
            w.writerow(
                [int(data.sample_ids[i]), int(data.labels[i]), int(corrupted[i])]
                + [repr(float(v)) for v in data.features[i]]
            )


def read_csv(path, num_classes):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    body = rows[1:]
    if not body:
        raise EmptyDataset(f"{path}: no samples")
    ids = [int(r[0]) for r in body]
    labels = [int(r[1]) for r in body]
    flags = [bool(int(r[2])) for r in body]
    X = np.array([[float(v) for v in r[3:]] for r in body])
    return LabeledDataset(X, labels, ids, num_classes, flags)
