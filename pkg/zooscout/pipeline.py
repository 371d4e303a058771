"""End-to-end orchestration shared by the CLI: supernets, zoo, encodings,
and the leave-one-dataset-out benchmark."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from zooscout.dataio import gen_family, write_dataset
from zooscout.encoding import FrozenExtractor, build_encodings, make_probe
from zooscout.errors import UsageError
from zooscout.metaspace import init_metaspace, train_metaspace
from zooscout.numerics import make_rng
from zooscout.report import fid_table, loo_table
from zooscout.retrieval import (
    SupernetStore,
    build_index,
    embed_new_dataset,
    fid_nearest_sources,
    finetune_candidates,
    query,
    select_best,
)
from zooscout.statistics import fid_matrix
from zooscout.supernet import (
    SupernetCheckpoint,
    init_supernet,
    log_to_records,
    save_supernet,
    train_supernet,
)
from zooscout.zoo import build_zoo

logger = logging.getLogger(__name__)

TOPK = (1, 5, 10)


def check_compatible(space, dataset):
    if tuple(dataset.input_shape) != tuple(space.input_shape):
        raise UsageError(f"{dataset.id}: images {dataset.input_shape} do not fit the space input {space.input_shape}")
    if dataset.classes != space.num_classes:
        raise UsageError(f"{dataset.id}: {dataset.classes} classes but the space head has {space.num_classes}")


def train_one_supernet(space, dataset, cfg, seed, index=0, path=None, source=None):
    """Train the supernet of one dataset; saves a checkpoint when ``path`` is given."""
    check_compatible(space, dataset)
    schedule = cfg.schedule()
    params = init_supernet(space, make_rng(seed, "weights", index))
    result = train_supernet(params, space, dataset, schedule, make_rng(seed, "train", index))
    meta = {
        "dataset_id": dataset.id,
        "dataset_path": str(source or ""),
        "seed": seed,
        "schedule": {"stage1_epochs": schedule.stage1_epochs, "stage2_epochs": schedule.stage2_epochs,
                     "subnets_per_batch": schedule.subnets_per_batch, "batch_size": schedule.batch_size,
                     "lr": schedule.lr},
        "optimizer_steps": result.optimizer.step,
        "log": log_to_records(result.log),
    }
    if path is not None:
        save_supernet(path, result.params, space, meta)
    return SupernetCheckpoint(result.params, space, meta, Path(path) if path else None)


def train_supernets(space, datasets, cfg, seed, out_dir=None, threads=1):
    """One supernet per dataset; dataset ``i`` draws from its own weight and training streams."""

    def train(item):
        i, (dataset_id, dataset) = item
        path = Path(out_dir) / f"{dataset_id}.sn" if out_dir else None
        return dataset_id, train_one_supernet(space, dataset, cfg, seed, i, path)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return dict(pool.map(train, enumerate(datasets.items())))


@dataclass
class LooRun:
    seed: int
    dataset: str
    t1: float
    t5: float
    t10: float
    t1_source: str
    fid_nearest: list
    source_hit: bool


def loo_query(dataset_id, zoo, cache, datasets, extractor, store, config, seed, threads):
    """Hold ``dataset_id`` out, train a meta-space on the rest and run T1/T5/T10."""
    ms, rc = config.metaspace, config.retrieval
    sub = zoo.without(dataset_id)
    model_dim = len(next(iter(cache.models.values())))
    params = init_metaspace(model_dim, extractor.feature_dim, ms.embed_dim, tuple(ms.hidden), seed=seed, **ms.hyper())
    trained = train_metaspace(sub, cache, params, ms.epochs, ms.lr, seed, ms.losses, ms.max_pairs, ms.min_gap)
    index = build_index(trained, sub, cache)
    d_new, raw = embed_new_dataset(datasets[dataset_id], extractor, trained, config.encoding.n_img, seed)
    result = query(index, d_new, max(TOPK))
    # One fine-tune pass over the top 10; T1/T5 are its prefixes.
    trials = finetune_candidates(result, datasets[dataset_id], store, rc.finetune_epochs, seed, threads,
                                 rc.batch_size, rc.lr)
    picks = [select_best(trials[:k]) for k in TOPK]
    sources = {d: cache.datasets[d].stats for d in sub.datasets()}
    nearest = fid_nearest_sources(raw.stats, sources, 2)
    t1_source = picks[0].chosen.candidate.entry.dataset_id
    run = LooRun(seed, dataset_id, *(p.chosen.val_acc for p in picks), t1_source, nearest, t1_source in nearest)
    logger.info("held out %s: T1 %.3f T5 %.3f T10 %.3f (T1 from %s, FID-nearest %s)",
                dataset_id, run.t1, run.t5, run.t10, t1_source, ",".join(nearest))
    return run


def eval_loo(config, seeds=1, threads=1, out_dir=None):
    """Leave-one-dataset-out benchmark on the synthetic family; returns (summary, detail) tables."""
    space = config.space.space()
    family = config.family.spec()
    runs = []
    for seed in range(config.run.seed, config.run.seed + seeds):
        seed_dir = Path(out_dir) / f"seed{seed}" if out_dir else None
        if seed_dir:
            seed_dir.mkdir(parents=True, exist_ok=True)
        datasets = gen_family(family, seed)
        if seed_dir:
            for dataset_id, ds in datasets.items():
                write_dataset(seed_dir / f"{dataset_id}.ds", ds)
        supernets = train_supernets(space, datasets, config.supernet, seed, seed_dir, threads)
        zoo = build_zoo(supernets, datasets, config.zoo.policy, seed, threads, config.zoo.transfer)
        if seed_dir:
            zoo.save(seed_dir / "zoo.jsonl")
        extractor = FrozenExtractor(space.input_shape, config.encoding.feature_dim, config.encoding.extractor_seed)
        probe = make_probe(space, config.encoding.n_z, config.encoding.probe_seed)
        cache = build_encodings(zoo, supernets, datasets, extractor, probe, config.encoding.n_img, seed, threads)
        if seed_dir:
            ids = list(cache.datasets)
            fids = fid_matrix([cache.datasets[d].stats for d in ids])
            fid_table(ids, fids).to_csv(seed_dir / "fid.csv", index=False, float_format="%.6f")
        store = SupernetStore({(str(c.path) if c.path else d): c for d, c in supernets.items()})
        for dataset_id in datasets:
            runs.append(loo_query(dataset_id, zoo, cache, datasets, extractor, store, config, seed, threads))
    summary, detail = loo_table(runs)
    if out_dir:
        detail.to_csv(Path(out_dir) / "loo.csv", index=False, float_format="%.6f")
    return summary, detail
