"""Synthetic datasets, long-tail skewing and non-iid client partitioning."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import GenerationError, InputError, LoadError

log = logging.getLogger(__name__)

CENTER_RETRIES = 1000
DIRICHLET_RETRIES = 10
BINARY_MAGIC = b"FPDS"
BINARY_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        if X.ndim != 2:
            X = X.reshape(len(self.y), -1)
        y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    @cached_property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    @property
    def present_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.class_counts)]

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.num_classes)

    def equals(self, other: LabeledDataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class SkewProfile:
    gamma: float
    ordering: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InputError(f"gamma must be in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str  # "sharding" or "dirichlet"
    num_clients: int
    seed: int = 0
    shards_per_client: int = 4
    alpha: float = 0.4

    def __post_init__(self):
        if self.strategy not in ("sharding", "dirichlet"):
            raise InputError(f"unknown partition strategy {self.strategy!r}")
        if self.num_clients < 1:
            raise InputError("num_clients must be >= 1")
        if self.strategy == "sharding" and self.shards_per_client < 1:
            raise InputError("shards_per_client must be >= 1")
        if self.strategy == "dirichlet" and not self.alpha > 0:
            raise InputError("alpha must be > 0")

    def apply(self, ds: LabeledDataset) -> list[LabeledDataset]:
        if self.strategy == "sharding":
            return partition_sharding(ds, self.num_clients, self.shards_per_client, self.seed)
        return partition_dirichlet(ds, self.num_clients, self.alpha, self.seed)


# ----------------------------------------------------------------------------
# generation


def default_center_scale(num_classes: int, dim: int, spread: float) -> float:
    # 1.0 unless low dimensions make the 4*spread separation unlikely
    return max(1.0, 4.0 * spread * num_classes ** (1.0 / dim) / np.sqrt(dim))


def blob_centers(
    num_classes: int,
    dim: int,
    spread: float,
    seed: int,
    center_scale: float | None = None,
) -> np.ndarray:
    """Cluster centers drawn from N(0, center_scale^2 I), pairwise >= 4*spread apart."""
    if num_classes < 2:
        raise InputError("need at least 2 classes")
    if not spread > 0:
        raise InputError("spread must be > 0")
    if center_scale is None:
        center_scale = default_center_scale(num_classes, dim, spread)
    rng = np.random.default_rng([seed, 0])
    min_dist = 4.0 * spread
    centers: list[np.ndarray] = []
    for n in range(num_classes):
        for _ in range(CENTER_RETRIES):
            c = rng.normal(0.0, center_scale, size=dim)
            if all(np.linalg.norm(c - o) >= min_dist for o in centers):
                centers.append(c)
                break
        else:
            raise GenerationError(
                f"could not place center {n} at distance >= {min_dist:g} from the "
                f"previous {n} centers after {CENTER_RETRIES} draws "
                f"(dim={dim}, center_scale={center_scale:g}); raise center_scale or dim"
            )
    return np.stack(centers)


def sample_blobs(
    centers: np.ndarray, per_class: int, spread: float, seed: int, stream: int = 1
) -> LabeledDataset:
    """Draw ``per_class`` samples around each center; ``stream`` picks an independent draw."""
    if per_class < 1:
        raise InputError("per_class must be >= 1")
    rng = np.random.default_rng([seed, stream])
    n_cls, dim = centers.shape
    X = np.concatenate(
        [centers[c] + spread * rng.standard_normal((per_class, dim)) for c in range(n_cls)]
    )
    y = np.repeat(np.arange(n_cls), per_class)
    return LabeledDataset(X, y, n_cls)


def gen_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    center_scale: float | None = None,
) -> LabeledDataset:
    """Isotropic Gaussian clusters, ``per_class`` samples each, ordered by label."""
    centers = blob_centers(num_classes, dim, spread, seed, center_scale)
    return sample_blobs(centers, per_class, spread, seed)


def split_holdout(ds: LabeledDataset, per_class: int, seed: int):
    """Hold out a balanced test set of ``per_class`` samples per class.

    Returns ``(train, test)``.
    """
    rng = np.random.default_rng([seed, 2])
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        if len(idx) < per_class:
            raise InputError(f"class {c} has {len(idx)} samples, cannot hold out {per_class}")
        test_idx.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    test_idx = np.concatenate(test_idx) if test_idx else np.zeros(0, dtype=np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)


# ----------------------------------------------------------------------------
# skew


def longtail_counts(n_max: int, num_classes: int, gamma: float) -> list[int]:
    """Per-rank class counts ``round(n_max * gamma**(r / (N-1)))``."""
    if num_classes == 1:
        return [n_max]
    return [
        int(math.floor(n_max * gamma ** (r / (num_classes - 1)) + 0.5))
        for r in range(num_classes)
    ]


def apply_longtail(ds: LabeledDataset, profile: SkewProfile, seed: int) -> LabeledDataset:
    counts = ds.class_counts
    if len(set(counts.tolist())) != 1:
        raise InputError("apply_longtail expects equal per-class counts")
    if profile.gamma == 1.0:
        return ds
    N = ds.num_classes
    ordering = profile.ordering if profile.ordering is not None else tuple(range(N))
    if sorted(ordering) != list(range(N)):
        raise InputError("ordering must be a permutation of the class ids")
    targets = longtail_counts(int(counts[0]), N, profile.gamma)
    if min(targets) < 1:
        raise InputError(f"gamma={profile.gamma} leaves a class with no samples")
    rng = np.random.default_rng([seed, 3])
    keep = []
    for rank, c in enumerate(ordering):
        idx = np.flatnonzero(ds.y == c)
        keep.append(rng.choice(idx, size=targets[rank], replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))


def imbalance_ratio(counts) -> float:
    counts = np.asarray(counts)
    if counts.size == 0:
        raise InputError("empty counts")
    if counts.min() < 1:
        raise InputError("all counts must be >= 1")
    return float(counts.min() / counts.max())


@dataclass(frozen=True)
class ClassGroups:
    many: tuple[int, ...]
    medium: tuple[int, ...]
    few: tuple[int, ...]

    def as_dict(self) -> dict[str, tuple[int, ...]]:
        return {"many": self.many, "medium": self.medium, "few": self.few}


def class_groups(counts) -> ClassGroups:
    """Many = top 20% of classes by count, Medium = next 30%, Few = the rest."""
    counts = np.asarray(counts)
    N = counts.size
    order = sorted(range(N), key=lambda c: (-counts[c], c))
    n_many = -(-2 * N // 10)
    n_medium = -(-3 * N // 10)
    return ClassGroups(
        tuple(order[:n_many]),
        tuple(order[n_many : n_many + n_medium]),
        tuple(order[n_many + n_medium :]),
    )


# ----------------------------------------------------------------------------
# partitioning


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``, summing exactly."""
    w = np.asarray(weights, dtype=np.float64)
    quota = w / w.sum() * total
    alloc = np.floor(quota).astype(np.int64)
    short = total - int(alloc.sum())
    if short > 0:
        # stable sort keeps lowest index first among equal remainders
        order = np.argsort(-(quota - alloc), kind="stable")
        alloc[order[:short]] += 1
    return alloc


def _shards_per_class(counts: np.ndarray, n_shards: int) -> np.ndarray:
    present = counts > 0
    alloc = present.astype(np.int64)
    while alloc.sum() < n_shards:
        size = np.where(present, counts / np.maximum(alloc, 1), -1.0)
        alloc[int(np.argmax(size))] += 1
    return alloc


def partition_sharding(ds: LabeledDataset, K: int, s: int, seed: int) -> list[LabeledDataset]:
    """Label-sorted shard partition, ``s`` shards per client.

    Shards are contiguous runs of the label-sorted data that never straddle a
    class boundary, so each client holds at most ``s`` classes. The ``K*s``
    shards are spread over classes so their sizes are as equal as possible.
    """
    if K < 1 or s < 1:
        raise InputError("K and s must be >= 1")
    if s > ds.num_classes:
        raise InputError(f"s={s} exceeds the number of classes {ds.num_classes}")
    n_shards = K * s
    counts = ds.class_counts
    n_present = int((counts > 0).sum())
    if n_shards > len(ds):
        raise InputError(f"{n_shards} shards requested but only {len(ds)} samples")
    if n_shards < n_present:
        raise InputError(
            f"{n_shards} shards cannot cover {n_present} classes without mixing labels"
        )
    order = np.argsort(ds.y, kind="stable")
    alloc = _shards_per_class(counts, n_shards)
    shards: list[np.ndarray] = []
    start = 0
    for c in range(ds.num_classes):
        block = order[start : start + counts[c]]
        start += counts[c]
        if alloc[c]:
            shards.extend(np.array_split(block, alloc[c]))
    rng = np.random.default_rng([seed, 4])
    perm = rng.permutation(n_shards)
    clients = []
    for k in range(K):
        idx = np.concatenate([shards[j] for j in perm[k * s : (k + 1) * s]])
        clients.append(ds.subset(np.sort(idx)))
    return clients


def _dirichlet_assign(ds: LabeledDataset, K: int, alpha: float, rng) -> list[np.ndarray]:
    owners: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        p = rng.dirichlet(np.full(K, alpha))
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.eye(K)[rng.integers(K)]
        alloc = largest_remainder(p, idx.size)
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(alloc)])
        for k in range(K):
            owners[k].append(idx[bounds[k] : bounds[k + 1]])
    return [np.sort(np.concatenate(o)) if o else np.zeros(0, np.int64) for o in owners]


def partition_dirichlet(ds: LabeledDataset, K: int, alpha: float, seed: int) -> list[LabeledDataset]:
    """Per-class Dirichlet(alpha) allocation over ``K`` clients."""
    if not alpha > 0:
        raise InputError("alpha must be > 0")
    if K < 1:
        raise InputError("K must be >= 1")
    for attempt in range(DIRICHLET_RETRIES + 1):
        rng = np.random.default_rng([seed, 5, attempt])
        parts = _dirichlet_assign(ds, K, alpha, rng)
        empty = sum(p.size == 0 for p in parts)
        if not empty:
            break
    else:
        log.warning(
            "dirichlet partition (alpha=%g, K=%d) left %d empty clients after %d retries",
            alpha, K, empty, DIRICHLET_RETRIES,
        )
    return [ds.subset(p) for p in parts]


def client_test_split(
    train: LabeledDataset, pool: LabeledDataset, size: int | None, seed: int
) -> LabeledDataset:
    """Draw a test set from ``pool`` with the class proportions of ``train``."""
    size = len(train) if size is None else size
    if len(train) == 0 or size == 0:
        return pool.subset([])
    rng = np.random.default_rng([seed, 6])
    want = largest_remainder(train.class_counts, size)
    picked = []
    for c in np.flatnonzero(want):
        idx = np.flatnonzero(pool.y == c)
        take = min(int(want[c]), idx.size)
        picked.append(rng.choice(idx, size=take, replace=False))
    idx = np.sort(np.concatenate(picked)) if picked else np.zeros(0, np.int64)
    return pool.subset(idx)


# ----------------------------------------------------------------------------
# file formats
#
# CSV: first row "N,d,count"; then `count` rows of d reals followed by the
# integer label. Reals are written with repr() so they round-trip exactly.
#
# Binary (little endian): b"FPDS", u32 version, u32 N, u32 d, u64 count, then
# count records of d float64 values followed by an int64 label.


def save_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([ds.num_classes, ds.dim, len(ds)])
        for x, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(label)])


def load_csv(path) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError(f"{path}: empty file")
    try:
        N, d, count = (int(v) for v in rows[0])
    except ValueError as exc:
        raise LoadError(f"{path}:1: bad header {rows[0]!r}") from exc
    body = rows[1:]
    if len(body) != count:
        raise LoadError(f"{path}: header says {count} rows, found {len(body)}")
    X = np.empty((count, d))
    y = np.empty(count, dtype=np.int64)
    for i, row in enumerate(body):
        if len(row) != d + 1:
            raise LoadError(f"{path}:{i + 2}: expected {d + 1} fields, got {len(row)}")
        X[i] = [float(v) for v in row[:d]]
        y[i] = int(row[d])
    return LabeledDataset(X, y, N)


def save_binary(ds: LabeledDataset, path) -> None:
    rec = np.empty(len(ds), dtype=[("x", "<f8", (ds.dim,)), ("y", "<i8")])
    rec["x"] = ds.X
    rec["y"] = ds.y
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIIQ", BINARY_VERSION, ds.num_classes, ds.dim, len(ds)))
        fh.write(rec.tobytes())


def load_binary(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise LoadError(f"{path}: not a dataset file")
    version, N, d, count = struct.unpack_from("<IIIQ", raw, 4)
    if version != BINARY_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    dt = np.dtype([("x", "<f8", (d,)), ("y", "<i8")])
    body = raw[4 + struct.calcsize("<IIIQ") :]
    if len(body) != count * dt.itemsize:
        raise LoadError(f"{path}: truncated payload")
    rec = np.frombuffer(body, dtype=dt)
    return LabeledDataset(rec["x"], rec["y"], N)


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_binary(path)
