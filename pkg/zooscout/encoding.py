"""Raw model encodings (architecture + functional probe) and raw dataset
encodings (mean frozen-extractor features plus their Gaussian fit)."""

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zooscout.dataio import to_input
from zooscout.errors import DataError, FormatError, UsageError
from zooscout.numerics import conv3x3, load_tensors, make_rng, relu, save_tensors
from zooscout.statistics import GaussianStats, fid, fit_gaussian
from zooscout.supernet import apply_mask, config_to_mask, trunk_forward

logger = logging.getLogger(__name__)


# -------------------------------
# Models
# -------------------------------
@dataclass(frozen=True)
class FunctionalProbe:
    z: np.ndarray  # (n_z, c, h, w)
    seed: int

    @property
    def n_z(self):
        return self.z.shape[0]


def make_probe(space, n_z=8, seed=0):
    """Fixed N(0, I) noise batch shared by every model encoding."""
    z = make_rng(seed, "probe").standard_normal((n_z,) + tuple(space.input_shape)).astype(np.float32)
    z.flags.writeable = False
    return FunctionalProbe(z, seed)


def encode_architecture(space, cfg):
    """[stage1.depth, stage1.width, stage1.expansion, stage2.depth, ...]"""
    if not space.contains(cfg):
        raise UsageError(f"architecture {cfg} is not in the search space")
    return np.array([v for c in cfg.stages for v in (c.depth, c.width, c.expansion)], dtype=np.float32)


def encode_functional(params, mask, probe):
    """Mean penultimate activation of the masked subnet over the probe batch."""
    if probe.z.shape[1] != params["stem"].shape[1]:
        raise UsageError(f"probe has {probe.z.shape[1]} channels, network expects {params['stem'].shape[1]}")
    feat, _ = trunk_forward(apply_mask(params, mask), probe.z)
    return feat.mean(axis=0).astype(np.float32)


@dataclass
class RawModelEncoding:
    arch_part: np.ndarray
    func_part: np.ndarray

    def vector(self):
        return np.concatenate([self.arch_part, self.func_part]).astype(np.float32)


def encode_model(space, params, cfg, probe):
    return RawModelEncoding(encode_architecture(space, cfg), encode_functional(params, config_to_mask(space, cfg), probe))


# -------------------------------
# Datasets
# -------------------------------
class FrozenExtractor:
    """Seeded random two-layer conv feature extractor; never trained."""

    def __init__(self, input_shape, feature_dim=32, seed=0, hidden=16):
        rng = make_rng(seed, "extractor")
        c = input_shape[0]
        self.w1 = (rng.standard_normal((hidden, c, 3, 3)) * math.sqrt(2.0 / (9 * c))).astype(np.float32)
        self.w2 = (rng.standard_normal((feature_dim, hidden, 3, 3)) * math.sqrt(2.0 / (9 * hidden))).astype(np.float32)
        self.w1.flags.writeable = False
        self.w2.flags.writeable = False
        self.input_shape = tuple(input_shape)
        self.seed = seed

    @property
    def feature_dim(self):
        return self.w2.shape[0]

    def features(self, images, batch_size=256):
        """(n, feature_dim) float64 features of uint8 images."""
        if tuple(images.shape[1:]) != self.input_shape:
            raise UsageError(f"extractor expects {self.input_shape}, got {tuple(images.shape[1:])}")
        out = []
        for i in range(0, len(images), batch_size):
            h, _ = relu(conv3x3(to_input(images[i:i + batch_size]), self.w1, 2)[0])
            h, _ = relu(conv3x3(h, self.w2, 2)[0])
            out.append(h.mean(axis=(2, 3)))
        return np.concatenate(out).astype(np.float64)


@dataclass
class RawDatasetEncoding:
    mean: np.ndarray  # (d_f,) float32
    stats: GaussianStats
    size: int


def dataset_rng(seed, dataset_id):
    """Sampling stream of one dataset; depends only on (seed, id)."""
    return make_rng(seed, "sampling", zlib.crc32(dataset_id.encode()))


def encode_dataset(dataset, extractor, n_img, rng):
    if len(dataset) == 0:
        raise DataError(f"{dataset.id}: cannot encode an empty dataset")
    n = len(dataset)
    if n_img >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, size=n_img, replace=False))
    if len(idx) < 2:
        raise DataError(f"{dataset.id}: need at least 2 images to fit feature statistics, got {len(idx)}")
    feats = extractor.features(dataset.images[idx])
    # Rows in canonical order, so storage order never changes the sums.
    feats = feats[np.lexsort(feats.T[::-1])]
    stats = fit_gaussian(feats)
    return RawDatasetEncoding(feats.mean(axis=0).astype(np.float32), stats, len(idx))


def dataset_fid(a, b, extractor, n_img=256, seed=0):
    """FID between two datasets in the frozen extractor's feature space."""
    ea = encode_dataset(a, extractor, n_img, dataset_rng(seed, a.id))
    eb = encode_dataset(b, extractor, n_img, dataset_rng(seed, b.id))
    return fid(ea.stats, eb.stats)


# -------------------------------
# Cache
# -------------------------------
class EncodingCache:
    """Raw encodings keyed by ``dataset_id|arch`` (models) and dataset id."""

    def __init__(self, models=None, datasets=None):
        self.models = dict(models or {})
        self.datasets = dict(datasets or {})

    def model_matrix(self, entries):
        missing = [e.key() for e in entries if e.key() not in self.models]
        if missing:
            raise DataError(f"no cached encoding for {len(missing)} zoo entries (first: {missing[0]})")
        return np.stack([self.models[e.key()] for e in entries])

    def save(self, path):
        path = Path(path)
        keys = sorted(self.models)
        ids = sorted(self.datasets)
        tensors = [np.stack([self.models[k] for k in keys]) if keys else np.zeros((0, 0), np.float32)]
        for d in ids:
            enc = self.datasets[d]
            tensors += [enc.mean, enc.stats.mean, enc.stats.cov]
        save_tensors(path, tensors)
        meta = {"models": keys, "datasets": ids,
                "counts": [self.datasets[d].stats.count for d in ids],
                "sizes": [self.datasets[d].size for d in ids]}
        path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = path.with_name(path.name + ".json")
        if not side.is_file():
            raise DataError(f"{path}: missing key list {side.name}")
        meta = json.loads(side.read_text())
        tensors = load_tensors(path)
        if len(tensors) != 1 + 3 * len(meta["datasets"]):
            raise FormatError(f"{path}: tensor count does not match its key list")
        models = dict(zip(meta["models"], tensors[0])) if meta["models"] else {}
        datasets = {}
        for i, d in enumerate(meta["datasets"]):
            mean, mu, cov = tensors[1 + 3 * i:4 + 3 * i]
            stats = GaussianStats(mu.astype(np.float64), cov.astype(np.float64), meta["counts"][i])
            datasets[d] = RawDatasetEncoding(mean, stats, meta["sizes"][i])
        return cls(models, datasets)


def build_encodings(manifest, supernets, datasets, extractor, probe, n_img=256, seed=0, threads=1):
    """Encode every zoo model and every zoo dataset."""
    cache = EncodingCache()
    space = manifest.space
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for dataset_id in manifest.datasets():
            if dataset_id not in datasets or dataset_id not in supernets:
                raise DataError(f"encodings: dataset or supernet for '{dataset_id}' not provided")
            cache.datasets[dataset_id] = encode_dataset(
                datasets[dataset_id], extractor, n_img, dataset_rng(seed, dataset_id))
            params = supernets[dataset_id].params
            rows = [e for _, e in manifest.by_dataset(dataset_id)]
            vectors = pool.map(lambda e: encode_model(space, params, e.arch, probe).vector(), rows)
            cache.models.update((e.key(), v) for e, v in zip(rows, vectors))
            logger.info("encoded %s: %d models", dataset_id, len(rows))
    return cache
