"""Shared virtual dataset: class-conditional Gaussian noise images and the
direct feature-space variant used by VFA."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, separated_points
from .errors import InputError


@dataclass(frozen=True)
class VirtualSpec:
    classes: int = 10
    per_class: int = 100
    base_side: int = 8
    up_factor: int = 4
    channels: int = 3
    mean_separation: float = 10.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 1:
            raise InputError("virtual classes and per_class must be >= 1")
        if self.base_side < 1 or self.up_factor < 1 or self.channels < 1:
            raise InputError("base_side, up_factor and channels must be >= 1")
        if not self.sigma > 0:
            raise InputError("sigma must be positive")
        if self.mean_separation < 0:
            raise InputError("mean_separation must be non-negative")

    @property
    def side(self) -> int:
        return self.base_side * self.up_factor

    @property
    def dim(self) -> int:
        return self.side * self.side * self.channels


@dataclass(frozen=True, eq=False)
class VirtualDataset:
    data: LabeledDataset
    spec: object = field(default=None)

    @property
    def features(self):
        return self.data.features

    @property
    def labels(self):
        return self.data.labels

    @property
    def classes(self) -> int:
        return self.data.class_count

    @property
    def dim(self) -> int:
        return self.data.dim

    def __len__(self):
        return len(self.data)


def upsample_nearest(image, factor: int) -> np.ndarray:
    """Replicate every pixel of the leading two axes into a factor x factor block."""
    if factor < 1:
        raise InputError("upsampling factor must be >= 1")
    img = np.asarray(image)
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def generate_noise_dataset(spec: VirtualSpec) -> VirtualDataset:
    """Per class, Gaussian noise around a class mean on a base_side grid,
    nearest-neighbour upsampled. Rows are grouped by class and flattened
    in (height, width, channel) order."""
    rng = np.random.default_rng(spec.seed)
    base_dim = spec.base_side * spec.base_side * spec.channels
    means = separated_points(spec.classes, base_dim, spec.mean_separation, rng)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    base = means[labels] + rng.normal(0.0, spec.sigma, size=(labels.size, base_dim))
    grids = base.reshape(-1, spec.base_side, spec.base_side, spec.channels)
    # upsample the two spatial axes of every sample at once
    up = np.repeat(np.repeat(grids, spec.up_factor, axis=1), spec.up_factor, axis=2)
    return VirtualDataset(LabeledDataset(up.reshape(labels.size, -1), labels, spec.classes), spec)


def noise_class_means(spec: VirtualSpec) -> np.ndarray:
    """Upsampled class means that ``generate_noise_dataset`` centres its noise on."""
    rng = np.random.default_rng(spec.seed)
    base_dim = spec.base_side * spec.base_side * spec.channels
    means = separated_points(spec.classes, base_dim, spec.mean_separation, rng)
    grids = means.reshape(-1, spec.base_side, spec.base_side, spec.channels)
    up = np.repeat(np.repeat(grids, spec.up_factor, axis=1), spec.up_factor, axis=2)
    return up.reshape(spec.classes, -1)


@dataclass(frozen=True)
class VfaSpec:
    classes: int
    feature_dim: int
    per_class: int
    mean_separation: float
    sigma: float
    seed: int


def generate_vfa_features(classes, feature_dim, per_class, mean_separation=10.0, sigma=1.0, seed=0) -> VirtualDataset:
    """Class-conditional Gaussian samples drawn directly in feature space."""
    if classes < 1 or per_class < 1 or feature_dim < 1:
        raise InputError("classes, feature_dim and per_class must be >= 1")
    if not sigma > 0:
        raise InputError("sigma must be positive")
    rng = np.random.default_rng(seed)
    means = separated_points(classes, feature_dim, mean_separation, rng)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.normal(0.0, sigma, size=(labels.size, feature_dim))
    spec = VfaSpec(classes, feature_dim, per_class, mean_separation, sigma, seed)
    return VirtualDataset(LabeledDataset(x, labels, classes), spec)


def vfa_class_means(classes, feature_dim, mean_separation=10.0, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return separated_points(classes, feature_dim, mean_separation, rng)


# -- binary container: little-endian u32 header (classes, per_class, dim),
#    then row-major float32 rows grouped by class.

_HEADER = struct.Struct("<3I")


def save_virtual(dataset: VirtualDataset, path) -> None:
    counts = np.bincount(dataset.labels, minlength=dataset.classes)
    per_class = int(counts[0])
    grouped = np.array_equal(dataset.labels, np.repeat(np.arange(dataset.classes), per_class))
    if not grouped:
        raise InputError("container format needs rows grouped by class with equal counts")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(dataset.classes, per_class, dataset.dim))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())


def load_virtual(path) -> VirtualDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InputError("virtual container is shorter than its header")
    classes, per_class, dim = _HEADER.unpack_from(raw)
    expected = classes * per_class * dim * 4
    if len(raw) - _HEADER.size != expected:
        raise InputError(f"virtual container payload is {len(raw) - _HEADER.size} bytes, expected {expected}")
    x = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(classes * per_class, dim)
    labels = np.repeat(np.arange(classes), per_class)
    return VirtualDataset(LabeledDataset(x.astype(np.float64), labels, classes))


def nearest_mean_accuracy(dataset) -> float:
    """Accuracy of the nearest empirical class-mean rule on its own data."""
    data = getattr(dataset, "data", dataset)
    x, y = data.features, data.labels
    means = np.stack([x[y == c].mean(axis=0) for c in range(data.class_count)])
    d = (means * means).sum(axis=1)[None, :] - 2.0 * x @ means.T
    return float((d.argmin(axis=1) == y).mean())
