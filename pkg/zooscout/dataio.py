"""Synthetic image datasets, the MNNSDS01 file format and stratified splits."""

import logging
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from zooscout.errors import DataError, FormatError, TruncationError, UsageError
from zooscout.numerics import make_rng

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MNNSDS01"
DATASET_VERSION = 1
_HEADER = struct.Struct("<HHIBHH")  # version, classes, n, c, h, w
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticFamilySpec:
    """Generator parameters of one synthetic dataset.

    Every class is a Gaussian blob plus an oriented sine texture. The class
    prototypes come from ``prototype_seed`` so that all members of a family
    share what each label means; ``shift`` moves the whole distribution
    (blob position, texture frequency, brightness, contrast) away from the
    ``shift = 0`` member.
    """

    classes: int = 4
    image_shape: tuple = (1, 16, 16)
    shift: float = 0.0
    noise: float = 0.3
    blob_sigma: float = 2.0
    texture_amp: float = 0.2
    prototype_seed: int = 7

    def validate(self):
        if self.classes < 2:
            raise UsageError("family: classes must be >= 2")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise UsageError(f"family: bad image_shape {self.image_shape}")
        if self.noise < 0 or self.blob_sigma <= 0:
            raise UsageError("family: noise must be >= 0 and blob_sigma > 0")


@dataclass(frozen=True)
class FamilySpec:
    """A named collection of synthetic datasets sharing class prototypes."""

    base: SyntheticFamilySpec = field(default_factory=SyntheticFamilySpec)
    ids: tuple = ("d0", "d1", "d2", "d3", "d4", "d5")
    shifts: tuple = (0.0, 0.25, 1.0, 1.25, 2.5, 2.75)
    samples: int = 400

    def validate(self):
        self.base.validate()
        if len(self.ids) != len(self.shifts):
            raise UsageError("family: ids and shifts must have the same length")
        if len(set(self.ids)) != len(self.ids):
            raise UsageError("family: dataset ids must be unique")
        if self.samples < self.base.classes * 20:
            raise UsageError(f"family: samples must be >= {self.base.classes * 20}")

    def members(self):
        for dataset_id, shift in zip(self.ids, self.shifts):
            yield dataset_id, replace(self.base, shift=float(shift))


@dataclass
class DatasetDescriptor:
    id: str
    images: np.ndarray  # (n, c, h, w) uint8
    labels: np.ndarray  # (n,) int64
    classes: int
    split_seed: int = 0
    fractions: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"{self.id}: images {self.images.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"{self.id}: label out of range [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    @cached_property
    def splits(self):
        """Stratified, disjoint and exhaustive train/val/test index arrays."""
        parts = {name: [] for name in SPLITS}
        for c in range(self.classes):
            members = np.flatnonzero(self.labels == c)
            members = make_rng(self.split_seed, "split", c).permutation(members)
            n_val = max(2, int(round(self.fractions[1] * len(members))))
            n_test = max(2, int(round(self.fractions[2] * len(members))))
            n_train = len(members) - n_val - n_test
            if n_train < 2:
                raise DataError(f"{self.id}: class {c} has too few samples ({len(members)}) to split")
            parts["train"].append(members[:n_train])
            parts["val"].append(members[n_train:n_train + n_val])
            parts["test"].append(members[n_train + n_val:])
        return {name: np.sort(np.concatenate(idx)) for name, idx in parts.items()}

    def split(self, name):
        """Return (inputs, labels) of one split, inputs already normalized."""
        idx = self.splits[name]
        return to_input(self.images[idx]), self.labels[idx]


def to_input(images):
    return (images.astype(np.float32) / 255.0 - 0.5) / 0.25


# -------------------------------
# Synthetic generation
# -------------------------------
def _prototypes(spec):
    rng = make_rng(spec.prototype_seed, "data")
    _, h, w = spec.image_shape
    centers = np.stack([rng.uniform(0.25 * w, 0.75 * w, spec.classes),
                        rng.uniform(0.25 * h, 0.75 * h, spec.classes)], axis=1)
    freqs = rng.uniform(0.12, 0.4, spec.classes)
    angles = rng.uniform(0.0, np.pi, spec.classes)
    return centers, freqs, angles


def gen_synthetic(spec, n, rng, dataset_id="synthetic", split_seed=0):
    """Draw ``n`` class-balanced images from the distribution ``spec`` describes."""
    spec.validate()
    if n < spec.classes * 20:
        raise UsageError(f"need at least {spec.classes * 20} samples for {spec.classes} classes, got {n}")

    c, h, w = spec.image_shape
    centers, freqs, angles = _prototypes(spec)
    labels = rng.permutation(np.arange(n) % spec.classes)

    delta = spec.shift
    cx = centers[labels, 0] + delta + rng.normal(0.0, 1.0, n)
    cy = centers[labels, 1] + 0.5 * delta + rng.normal(0.0, 1.0, n)
    freq = freqs[labels] * (1.0 + 0.2 * delta)
    theta = angles[labels]
    amp = rng.uniform(0.7, 1.0, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx, yy = xx[None], yy[None]
    blob = np.exp(-((xx - cx[:, None, None]) ** 2 + (yy - cy[:, None, None]) ** 2) / (2 * spec.blob_sigma ** 2))
    proj = xx * np.cos(theta)[:, None, None] + yy * np.sin(theta)[:, None, None]
    texture = 0.5 * (1 + np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None]))

    contrast = 1.0 / (1.0 + 0.15 * delta)
    base = 0.15 + 0.08 * delta + contrast * (amp[:, None, None] * blob * 0.6 + spec.texture_amp * texture)
    images = base[:, None] + rng.normal(0.0, spec.noise, (n, c, h, w))
    images = np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)
    return DatasetDescriptor(dataset_id, images, labels, spec.classes, split_seed=split_seed)


def gen_family(family, seed):
    """Generate every member of ``family``; member ``i`` draws from its own data stream."""
    family.validate()
    datasets = {}
    for i, (dataset_id, spec) in enumerate(family.members()):
        datasets[dataset_id] = gen_synthetic(spec, family.samples, make_rng(seed, "data", i), dataset_id)
    return datasets


# -------------------------------
# MNNSDS01 files
# -------------------------------
def dump_dataset(ds):
    n, c, h, w = ds.images.shape
    header = DATASET_MAGIC + _HEADER.pack(DATASET_VERSION, ds.classes, n, c, h, w)
    return header + ds.images.tobytes() + ds.labels.astype("<u2").tobytes()


def parse_dataset(blob, dataset_id, source="<bytes>", split_seed=0):
    offset = 0

    def take(size):
        nonlocal offset
        if offset + size > len(blob):
            raise TruncationError(source, offset, offset + size - len(blob))
        chunk = blob[offset:offset + size]
        offset += size
        return chunk

    magic = take(len(DATASET_MAGIC))
    if magic != DATASET_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    version, classes, n, c, h, w = _HEADER.unpack(take(_HEADER.size))
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    images = np.frombuffer(take(n * c * h * w), dtype=np.uint8).reshape(n, c, h, w)
    labels = np.frombuffer(take(2 * n), dtype="<u2").astype(np.int64)
    if offset != len(blob):
        raise FormatError(f"{source}: {len(blob) - offset} trailing bytes")
    if n and labels.max() >= classes:
        raise DataError(f"{source}: label {int(labels.max())} out of range for {classes} classes")
    return DatasetDescriptor(dataset_id, images.copy(), labels, classes, split_seed=split_seed)


def write_dataset(path, ds):
    Path(path).write_bytes(dump_dataset(ds))
    logger.debug("wrote dataset %s (%d samples) to %s", ds.id, len(ds), path)


def read_dataset(path, split_seed=0):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such dataset file")
    return parse_dataset(path.read_bytes(), path.stem, source=str(path), split_seed=split_seed)
