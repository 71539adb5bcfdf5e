"""Datasets, Non-IID partitioners, IDX ingestion and the mixed batch sampler."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError, IdxParseError, InputError, PartitionError


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InputError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise InputError("features must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_histogram(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.class_count)


@dataclass(frozen=True)
class ClientShard:
    owner: int
    indices: np.ndarray
    dataset: LabeledDataset

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size == 0:
            raise PartitionError(f"client {self.owner} has an empty shard")
        if np.unique(idx).size != idx.size or idx.min() < 0 or idx.max() >= len(self.dataset):
            raise PartitionError(f"client {self.owner}: indices must be unique and in range")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def n_samples(self) -> int:
        return self.indices.size

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "lda"
    clients: int = 10
    alpha: float = 0.1
    samples_per_client: int = 500
    dominant_count: int = 4950
    tail_count_low: int = 5
    tail_count_high: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("lda", "two_class", "subset"):
            raise PartitionError(f"unknown partition scheme {self.scheme!r}")
        if self.clients < 1:
            raise PartitionError("need at least one client")
        if self.scheme == "lda" and not self.alpha > 0:
            raise PartitionError("lda alpha must be positive")


def separated_points(count, dim, min_distance, rng, scale=None, max_tries=10_000):
    """Rejection-sample ``count`` Gaussian points with pairwise distance >= min_distance."""
    scale = float(min_distance) if scale is None else float(scale)
    if count == 1 or min_distance <= 0:
        return rng.normal(0.0, max(scale, 1.0), size=(count, dim))
    tries = 0
    while True:
        points = [rng.normal(0.0, scale, size=dim)]
        while len(points) < count and tries < max_tries:
            candidate = rng.normal(0.0, scale, size=dim)
            tries += 1
            if min(np.linalg.norm(candidate - p) for p in points) >= min_distance:
                points.append(candidate)
        if len(points) == count:
            return np.array(points)
        # low dimensions can pack badly, so widen the cloud and retry
        scale *= 1.5
        tries = 0


def make_synthetic_mixture(class_count, dim, per_class, center_spread, noise_sigma, seed) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, with centres at least
    ``center_spread`` apart. Rows are grouped by class."""
    if min(class_count, dim, per_class) < 1 or noise_sigma < 0 or center_spread < 0:
        raise InputError("counts must be positive and spreads non-negative")
    rng = np.random.default_rng(seed)
    centers = separated_points(class_count, dim, center_spread, rng)
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, dim)) * noise_sigma
    return LabeledDataset(centers[labels] + noise, labels, class_count)


def train_test_split(dataset: LabeledDataset, test_per_class: int, seed):
    """Stratified split holding out ``test_per_class`` samples of every class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if idx.size <= test_per_class:
            raise PartitionError(f"class {c} has {idx.size} samples, cannot hold out {test_per_class}")
        test.append(idx[:test_per_class])
        train.append(idx[test_per_class:])
    return dataset.subset(np.sort(np.concatenate(train))), dataset.subset(np.sort(np.concatenate(test)))


def _largest_remainder(proportions, total):
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    # stable sort keeps the lowest client id first among equal remainders
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_lda(dataset: LabeledDataset, clients, alpha, seed, max_attempts=100) -> list[ClientShard]:
    """Per-class Dirichlet(alpha) split of each class's samples over clients.

    The whole draw is repeated until every client owns at least one sample.
    """
    if clients < 1 or not alpha > 0:
        raise PartitionError("need clients >= 1 and alpha > 0")
    if len(dataset) < clients:
        raise PartitionError(f"{len(dataset)} samples cannot cover {clients} clients")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.class_count)]
    for _ in range(max_attempts):
        owned = [[] for _ in range(clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            q = rng.dirichlet(np.full(clients, float(alpha)))
            counts = _largest_remainder(q, idx.size)
            shuffled = rng.permutation(idx)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for k in range(clients):
                owned[k].append(shuffled[bounds[k] : bounds[k + 1]])
        parts = [np.sort(np.concatenate(chunks)) for chunks in owned]
        if all(p.size for p in parts):
            return [ClientShard(k, p, dataset) for k, p in enumerate(parts)]
    raise PartitionError(f"could not draw a partition without empty clients in {max_attempts} attempts")


def partition_two_class(dataset: LabeledDataset, clients, samples_per_client, seed) -> list[ClientShard]:
    """Each client gets ``samples_per_client`` samples from exactly two classes.

    Classes are dealt round-robin from a seeded class permutation so that
    demand spreads evenly over classes.
    """
    c = dataset.class_count
    if c < 2:
        raise PartitionError("two-class partition needs at least 2 classes")
    if samples_per_client < 2:
        raise PartitionError("each client needs at least one sample per class")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == k))) for k in range(c)]
    order = rng.permutation(c)
    first = (samples_per_client + 1) // 2
    shards = []
    for k in range(clients):
        a, b = order[(2 * k) % c], order[(2 * k + 1) % c]
        picked = []
        for cls, n in ((a, first), (b, samples_per_client - first)):
            if len(pools[cls]) < n:
                raise PartitionError(f"class {cls} exhausted while filling client {k}")
            picked.extend(pools[cls][:n])
            del pools[cls][:n]
        shards.append(ClientShard(k, np.sort(np.array(picked)), dataset))
    return shards


def partition_subset(
    dataset: LabeledDataset, clients, dominant_count, tail_count_low, tail_count_high, seed
) -> list[ClientShard]:
    """Client k holds ``dominant_count`` samples of class k mod C plus a
    small tail (low or high count, seed-chosen) of every other class."""
    c = dataset.class_count
    if clients > c:
        raise PartitionError(f"{clients} clients exceed {c} classes")
    if not 0 < tail_count_low <= tail_count_high:
        raise PartitionError("need 0 < tail_count_low <= tail_count_high")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == k))) for k in range(c)]
    shards = []
    for k in range(clients):
        dominant = k % c
        picked = []
        for cls in range(c):
            if cls == dominant:
                n = dominant_count
            else:
                n = tail_count_high if rng.random() < 0.5 else tail_count_low
            if len(pools[cls]) < n:
                raise PartitionError(f"class {cls} exhausted while filling client {k}")
            picked.extend(pools[cls][:n])
            del pools[cls][:n]
        shards.append(ClientShard(k, np.sort(np.array(picked)), dataset))
    return shards


def partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.scheme == "lda":
        return partition_lda(dataset, spec.clients, spec.alpha, spec.seed)
    if spec.scheme == "two_class":
        return partition_two_class(dataset, spec.clients, spec.samples_per_client, spec.seed)
    return partition_subset(
        dataset, spec.clients, spec.dominant_count, spec.tail_count_low, spec.tail_count_high, spec.seed
    )


# -- IDX files ---------------------------------------------------------------

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
_UBYTE = 0x08
_MAX_ELEMENTS = 2**31 - 1


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file into a uint8 array shaped by its header."""
    data = bytes(data)
    if len(data) < 4:
        raise IdxParseError(f"truncated magic number ({len(data)} of 4 bytes)", len(data))
    if data[0] != 0 or data[1] != 0:
        raise IdxParseError(f"bad magic 0x{data[:4].hex()}: leading bytes must be zero", 0)
    if data[2] != _UBYTE:
        raise IdxParseError(f"unsupported element type 0x{data[2]:02x} (only unsigned byte)", 2)
    ndim = data[3]
    if ndim == 0:
        raise IdxParseError("dimension count must be at least 1", 3)
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxParseError(f"truncated header: need {header_len} bytes, have {len(data)}", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total > _MAX_ELEMENTS:
            raise IdxParseError(f"dimension product overflows {_MAX_ELEMENTS} elements", 4 + 4 * i)
    actual = len(data) - header_len
    if actual < total:
        raise IdxParseError(f"payload too short: expected {total} bytes, got {actual}", len(data))
    if actual > total:
        raise IdxParseError(f"payload too long: expected {total} bytes, got {actual}", header_len + total)
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims).copy()


def encode_idx(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise InputError("only uint8 arrays can be encoded as IDX")
    if arr.ndim < 1 or arr.ndim > 255:
        raise InputError("IDX supports 1 to 255 dimensions")
    header = bytes([0, 0, _UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def dataset_from_idx(images: bytes, labels: bytes, class_count=None) -> LabeledDataset:
    """Flatten IDX images to rows scaled to [0, 1] and pair them with IDX labels."""
    x = parse_idx(images)
    y = parse_idx(labels).astype(np.int64)
    if y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise InputError(f"{x.shape[0]} images but label array has shape {y.shape}")
    count = int(y.max()) + 1 if class_count is None else class_count
    return LabeledDataset(x.reshape(x.shape[0], -1).astype(np.float64) / 255.0, y, count)


# -- batching ----------------------------------------------------------------


class MixedBatch(NamedTuple):
    natural_index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    virtual_index: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def mixed_batch_iter(shard: ClientShard, virtual, batch_size, virtual_batch_size, epoch_seed) -> Iterator[MixedBatch]:
    """One epoch of shuffled natural batches, each paired with
    ``virtual_batch_size`` virtual samples drawn with replacement."""
    if batch_size < 1 or virtual_batch_size < 0:
        raise ConfigurationError("need batch_size >= 1 and virtual_batch_size >= 0")
    if virtual_batch_size > 0 and (virtual is None or len(virtual) == 0):
        raise ConfigurationError("virtual_batch_size > 0 but the virtual dataset is empty")
    ss = _seed_sequence(epoch_seed)
    shuffle_ss, virtual_ss = (np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i,)) for i in range(2))
    order = shard.indices[np.random.default_rng(shuffle_ss).permutation(shard.n_samples)]
    vrng = np.random.default_rng(virtual_ss)
    data = shard.dataset
    empty = np.empty(0, dtype=np.int64)
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        if virtual_batch_size:
            vidx = vrng.integers(0, len(virtual), size=virtual_batch_size)
            vx, vy = virtual.features[vidx], virtual.labels[vidx]
        else:
            vidx = empty
            vx = np.empty((0, virtual.dim if virtual is not None else 0))
            vy = empty
        yield MixedBatch(idx, data.features[idx], data.labels[idx], vidx, vx, vy)
