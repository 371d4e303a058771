"""Querying the meta-space for an unseen dataset and the top-k fine-tune-and-select protocol."""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from zooscout.encoding import dataset_rng, encode_dataset
from zooscout.errors import DataError, UsageError, ZooscoutError
from zooscout.metaspace import embed_datasets, embed_models
from zooscout.numerics import init_mlp, load_tensors, make_rng, save_tensors
from zooscout.statistics import fid
from zooscout.supernet import accuracy, extract_subnet, load_supernet, train_network

logger = logging.getLogger(__name__)


@dataclass
class ModelIndex:
    """Unit model embeddings, one row per zoo entry in manifest order."""

    embeddings: np.ndarray
    entries: list
    fingerprint: str

    def __len__(self):
        return len(self.entries)


def build_index(trained, manifest, cache):
    embeddings = embed_models(trained.params, cache.model_matrix(manifest.entries).astype(np.float32))
    return ModelIndex(embeddings, list(manifest.entries), manifest.fingerprint())


def save_index(path, index):
    path = Path(path)
    save_tensors(path, [index.embeddings])
    path.with_name(path.name + ".json").write_text(
        json.dumps({"zoo": index.fingerprint, "rows": len(index)}, sort_keys=True))


def load_index(path, manifest):
    """Load an index and refuse it unless it was built from ``manifest``."""
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.is_file() or not side.is_file():
        raise DataError(f"{path}: missing index or its fingerprint file")
    meta = json.loads(side.read_text())
    if meta.get("zoo") != manifest.fingerprint():
        raise DataError(f"{path}: index was built from a different zoo manifest")
    (embeddings,) = load_tensors(path)
    if len(embeddings) != len(manifest.entries):
        raise DataError(f"{path}: {len(embeddings)} rows for {len(manifest.entries)} zoo entries")
    return ModelIndex(embeddings, list(manifest.entries), meta["zoo"])


# -------------------------------
# Query
# -------------------------------
@dataclass(frozen=True)
class Candidate:
    position: int  # manifest index
    entry: object
    score: float


@dataclass
class QueryResult:
    candidates: list

    @property
    def selected(self):
        return self.candidates[0]

    def top(self, k):
        return QueryResult(self.candidates[:k])


def query(index, d_new, k):
    """Top-k zoo entries by cosine similarity; equal scores keep manifest order."""
    if len(index) == 0:
        raise UsageError("cannot query an empty model index")
    if k < 1:
        raise UsageError("query needs k >= 1")
    if k > len(index):
        logger.warning("top-%d requested but the index only has %d models; clamping", k, len(index))
        k = len(index)
    d_new = np.asarray(d_new, dtype=np.float64)
    scores = index.embeddings.astype(np.float64) @ (d_new / np.linalg.norm(d_new))
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return QueryResult([Candidate(int(i), index.entries[i], float(scores[i])) for i in order])


def embed_new_dataset(dataset, extractor, trained, n_img=256, seed=0):
    """Unit embedding E_d(D) of a dataset the meta-space has not seen."""
    raw = encode_dataset(dataset, extractor, n_img, dataset_rng(seed, dataset.id))
    return embed_datasets(trained.params, raw.mean[None, :])[0], raw


def fid_nearest_sources(query_stats, source_stats, count=2):
    """Source dataset ids ordered by FID to the query, nearest first."""
    ranked = sorted(source_stats, key=lambda d: (fid(query_stats, source_stats[d]), d))
    return ranked[:count]


# -------------------------------
# Fine-tune and select
# -------------------------------
class SupernetStore:
    """Loads supernet checkpoints by reference, once each."""

    def __init__(self, preloaded=None):
        self._ckpts = dict(preloaded or {})
        self._lock = threading.Lock()

    def get(self, ref):
        with self._lock:
            if ref not in self._ckpts:
                try:
                    self._ckpts[ref] = load_supernet(ref)
                except (ZooscoutError, OSError) as e:
                    raise DataError(f"cannot extract candidate weights from '{ref}': {e}") from e
            return self._ckpts[ref]


@dataclass
class Trial:
    candidate: Candidate
    val_acc: float
    params: dict = field(repr=False, default=None)


@dataclass
class Selection:
    chosen: Trial
    trials: list


def materialize(store, candidate, num_classes, rng):
    """Compact network of a candidate with inherited weights; a new head if the class count differs."""
    ckpt = store.get(candidate.entry.supernet_ref)
    params = extract_subnet(ckpt.params, ckpt.space, candidate.entry.arch)
    if params["head.w"].shape[1] != num_classes:
        (head,) = init_mlp([params["head.w"].shape[0], num_classes], rng)
        params["head.w"], params["head.b"] = head.weight, head.bias
    return params


def _finetune(store, candidate, target, epochs, seed, batch_size, lr):
    rng = make_rng(seed, "finetune", candidate.position)
    params = materialize(store, candidate, target.classes, rng)
    train, val = target.split("train"), target.split("val")
    if epochs > 0:
        result = train_network(params, train, val, epochs, rng, batch_size, lr, target.id)
        val_acc = result.log[-1].val_acc
    else:
        val_acc = accuracy(params, *val)
    logger.debug("candidate %d (%s from %s): val %.3f", candidate.position, candidate.entry.arch,
                  candidate.entry.dataset_id, val_acc)
    return Trial(candidate, val_acc, params)


def finetune_candidates(result, target, store, finetune_epochs=1, seed=0, threads=1, batch_size=32, lr=5e-3):
    """Fine-tune every candidate on its own weight copy.

    Each candidate's run depends only on (seed, manifest position), so a
    candidate scores the same in every top-k it belongs to.
    """
    if not result.candidates:
        raise UsageError("no candidates to fine-tune")
    for c in result.candidates:
        store.get(c.entry.supernet_ref)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(
            lambda c: _finetune(store, c, target, finetune_epochs, seed, batch_size, lr), result.candidates))


def select_best(trials):
    """Highest validation accuracy; ties go to the better-ranked (higher cosine) candidate."""
    best = trials[0]
    for trial in trials[1:]:
        if trial.val_acc > best.val_acc:
            best = trial
    return Selection(best, trials)


def topk_select(candidates, target, store, finetune_epochs=1, seed=0, threads=1, batch_size=32, lr=5e-3):
    trials = finetune_candidates(candidates, target, store, finetune_epochs, seed, threads, batch_size, lr)
    selection = select_best(trials)
    logger.info("selected candidate %d (%s from %s) with val acc %.3f out of %d",
                selection.chosen.candidate.position, selection.chosen.candidate.entry.arch,
                selection.chosen.candidate.entry.dataset_id, selection.chosen.val_acc, len(trials))
    return selection


@dataclass
class ConvergencePoint:
    epoch: int
    val_acc: float
    test_acc: float


def continue_training(selection, target, epochs, checkpoints=(), seed=0, batch_size=32, lr=5e-3):
    """Keep training the chosen model; record val/test accuracy at the checkpoint epochs."""
    params = {k: v.copy() for k, v in selection.chosen.params.items()}
    rng = make_rng(seed, "finetune", selection.chosen.candidate.position, 1)
    train, val, test = target.split("train"), target.split("val"), target.split("test")
    marks = set(checkpoints) | {epochs}
    state, points = None, []
    for epoch in range(1, epochs + 1):
        result = train_network(params, train, val, 1, rng, batch_size, lr, target.id, state=state)
        state = result.optimizer
        if epoch in marks:
            points.append(ConvergencePoint(epoch, result.log[-1].val_acc, accuracy(params, *test)))
    return params, points
