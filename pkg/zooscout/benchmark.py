"""Synthetic affinity zoo: meta-space retrieval with a known ground truth.

Every dataset has a latent direction ``u`` and every zoo model a latent
vector ``v``; true performance is ``0.5 + 0.45 * tanh(u . v)``. The raw
encodings the meta-space sees are fixed random nonlinear views of those
latents, so retrieval quality can be measured exactly, both on the training
datasets and on held-out ones.

With ``clusters`` set, dataset latents are jittered copies of a few shared
centers, and ``perf_noise`` perturbs the zoo's P-hat while retrieval is
still scored against the true affinities. Datasets that resemble each other
then carry evidence about each other's best models.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from zooscout.config import MetaSpaceConfig
from zooscout.encoding import EncodingCache, RawDatasetEncoding
from zooscout.errors import UsageError
from zooscout.metaspace import embed_datasets, embed_models, init_metaspace, train_metaspace
from zooscout.numerics import make_rng
from zooscout.statistics import GaussianStats, sign_test, spearman
from zooscout.supernet import SearchSpace
from zooscout.zoo import ZooEntry, ZooManifest

logger = logging.getLogger(__name__)

# The five loss combinations compared by the ablation; perf is always on.
ABLATION_SETS = {
    "rank": ("perf", "rank"),
    "fid": ("perf", "fid"),
    "contrastive": ("perf", "contrastive"),
    "fid+contrastive": ("perf", "fid", "contrastive"),
    "rank+fid": ("perf", "rank", "fid"),
}
COMPARISONS = (("rank+fid", "rank"), ("rank+fid", "contrastive"))


@dataclass(frozen=True)
class AffinitySpec:
    datasets: int = 6
    held_out: int = 2
    models_per_dataset: int = 32
    latent_dim: int = 4
    model_dim: int = 24
    dataset_dim: int = 16
    noise: float = 0.05
    sharpness: float = 1.5
    top_n: int = 5
    clusters: int = 0  # 0: independent dataset latents
    jitter: float = 0.1
    perf_noise: float = 0.0

    def validate(self):
        if self.datasets < 2 or self.held_out < 0:
            raise UsageError("affinity: need >= 2 training datasets and held_out >= 0")
        if self.clusters < 0 or self.jitter < 0 or self.perf_noise < 0:
            raise UsageError("affinity: clusters, jitter and perf_noise must be >= 0")
        if self.models_per_dataset < max(3, self.top_n):
            raise UsageError(f"affinity: models_per_dataset must be >= {max(3, self.top_n)}")
        if min(self.latent_dim, self.model_dim, self.dataset_dim) < 1:
            raise UsageError("affinity: dimensions must be >= 1")
        return self


@dataclass
class AffinityZoo:
    manifest: ZooManifest
    cache: EncodingCache
    dataset_latents: dict  # id -> (latent_dim,)
    model_latents: np.ndarray  # (entries, latent_dim), manifest order
    held_out: dict = field(default_factory=dict)  # id -> RawDatasetEncoding

    def true_perf(self, dataset_id, sharpness):
        return 0.5 + 0.45 * np.tanh(sharpness * (self.model_latents @ self.dataset_latents[dataset_id]))


def make_affinity_zoo(spec=AffinitySpec(), seed=0, space=None):
    spec.validate()
    space = space or SearchSpace()
    if spec.models_per_dataset > space.size():
        raise UsageError(f"affinity: {spec.models_per_dataset} models per dataset exceed the space size {space.size()}")
    rng = make_rng(seed, "benchmark")
    # Fixed nonlinear views of the latents.
    a = rng.standard_normal((spec.latent_dim, spec.model_dim)) / np.sqrt(spec.latent_dim)
    b = rng.standard_normal((spec.latent_dim, spec.dataset_dim)) / np.sqrt(spec.latent_dim)
    configs = list(space.configs())

    def dataset_view(u):
        mean = np.tanh(u @ b) + spec.noise * rng.standard_normal(spec.dataset_dim)
        stats = GaussianStats(mean.astype(np.float64), 0.01 * np.eye(spec.dataset_dim), 256)
        return RawDatasetEncoding(mean.astype(np.float32), stats, 256)

    ids = [f"a{i}" for i in range(spec.datasets + spec.held_out)]
    if spec.clusters:
        centers = rng.standard_normal((spec.clusters, spec.latent_dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        latents = centers[np.arange(len(ids)) % spec.clusters]
        latents = latents + spec.jitter * rng.standard_normal(latents.shape)
    else:
        latents = rng.standard_normal((len(ids), spec.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    dataset_latents = dict(zip(ids, latents))

    entries, model_latents, cache, held_out = [], [], EncodingCache(), {}
    for i, dataset_id in enumerate(ids):
        view = dataset_view(dataset_latents[dataset_id])
        if i >= spec.datasets:
            held_out[dataset_id] = view
            continue
        cache.datasets[dataset_id] = view
        v = rng.standard_normal((spec.models_per_dataset, spec.latent_dim))
        perf = 0.5 + 0.45 * np.tanh(spec.sharpness * (v @ dataset_latents[dataset_id]))
        raw = np.tanh(v @ a) + spec.noise * rng.standard_normal((len(v), spec.model_dim))
        if spec.perf_noise:
            perf = np.clip(perf + spec.perf_noise * rng.standard_normal(len(perf)), 0.0, 1.0)
        for j, cfg_index in enumerate(rng.choice(len(configs), size=len(v), replace=False)):
            entry = ZooEntry(dataset_id, configs[cfg_index], "synthetic", float(perf[j]))
            entries.append(entry)
            cache.models[entry.key()] = raw[j].astype(np.float32)
        model_latents.append(v)
    manifest = ZooManifest(entries, space, {"benchmark": "affinity", "seed": seed}).validate()
    return AffinityZoo(manifest, cache, dataset_latents, np.concatenate(model_latents), held_out)


@dataclass
class RetrievalMetrics:
    spearman: dict  # training dataset -> Correlation(cosine, P-hat)
    regret: dict  # training dataset -> best P-hat minus P-hat of the top-cosine model
    retrieval_acc: float  # mean top-n overlap over every query (training and held-out)

    @property
    def median_spearman(self):
        values = [c.value for c in self.spearman.values() if not c.degenerate]
        return float(np.median(values)) if values else float("nan")

    @property
    def max_regret(self):
        return max(self.regret.values())


def _top_overlap(scores, truth, n):
    top = np.lexsort((np.arange(len(scores)), -scores))[:n]
    best = np.lexsort((np.arange(len(truth)), -truth))[:n]
    return len(set(top.tolist()) & set(best.tolist())) / n


def evaluate_retrieval(trained, zoo, spec=AffinitySpec()):
    """Score a trained meta-space against the zoo's known affinities."""
    manifest, cache = zoo.manifest, zoo.cache
    model_embs = embed_models(trained.params, cache.model_matrix(manifest.entries).astype(np.float32))
    rho, regret, overlaps = {}, {}, []
    for dataset_id in manifest.datasets():
        rows = np.array([i for i, _ in manifest.by_dataset(dataset_id)])
        d = embed_datasets(trained.params, cache.datasets[dataset_id].mean[None, :])[0]
        cos = model_embs[rows].astype(np.float64) @ d
        perf = np.array([manifest.entries[i].estimated_perf for i in rows])
        rho[dataset_id] = spearman(cos, perf)
        regret[dataset_id] = float(perf.max() - perf[int(np.argmax(cos))])
        overlaps.append(_top_overlap(model_embs.astype(np.float64) @ d, zoo.true_perf(dataset_id, spec.sharpness),
                                     spec.top_n))
    for dataset_id, raw in zoo.held_out.items():
        d = embed_datasets(trained.params, raw.mean[None, :])[0]
        overlaps.append(_top_overlap(model_embs.astype(np.float64) @ d, zoo.true_perf(dataset_id, spec.sharpness),
                                     spec.top_n))
    return RetrievalMetrics(rho, regret, float(np.mean(overlaps)))


def run_affinity(spec=AffinitySpec(), loss_set=("perf", "rank", "fid"), seed=0, metaspace=None):
    """Build the affinity zoo for ``seed``, train a meta-space on it and score it.

    ``metaspace`` is a ``MetaSpaceConfig``; its defaults apply when omitted.
    """
    cfg = metaspace or MetaSpaceConfig()
    zoo = make_affinity_zoo(spec, seed)
    params = init_metaspace(spec.model_dim, spec.dataset_dim, cfg.embed_dim, tuple(cfg.hidden), seed=seed,
                            **cfg.hyper())
    trained = train_metaspace(zoo.manifest, zoo.cache, params, cfg.epochs, cfg.lr, seed, loss_set,
                              cfg.max_pairs, cfg.min_gap)
    return evaluate_retrieval(trained, zoo, spec), trained


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    p_value: float


@dataclass
class AblationResult:
    scores: dict  # loss-set name -> retrieval accuracy per seed
    tests: dict  # (a, b) -> SignTest of "a beats b"


# Three clusters of three datasets with noisy P-hat; one dataset per cluster is held out.
ABLATION_SPEC = AffinitySpec(datasets=9, held_out=3, clusters=3, jitter=0.1, perf_noise=0.15)


def ablation(seeds, spec=ABLATION_SPEC, metaspace=None, sets=None):
    if seeds < 1:
        raise UsageError("ablation needs at least one seed")
    sets = sets or ABLATION_SETS
    scores = {name: [] for name in sets}
    for seed in range(seeds):
        for name, loss_set in sets.items():
            metrics, _ = run_affinity(spec, loss_set, seed, metaspace)
            scores[name].append(metrics.retrieval_acc)
            logger.info("ablation seed %d %s: retrieval acc %.3f", seed, name, metrics.retrieval_acc)
    tests = {}
    for a, b in COMPARISONS:
        if a in scores and b in scores:
            diff = np.array(scores[a]) - np.array(scores[b])
            wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
            tests[(a, b)] = SignTest(wins, losses, sign_test(wins, losses))
    return AblationResult(scores, tests)
