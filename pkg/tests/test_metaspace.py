import logging

import numpy as np
import pytest

from losses.dispatcher import LOSSES
from zooscout.benchmark import AffinitySpec, make_affinity_zoo, run_affinity
from zooscout.errors import DataError, UsageError
from zooscout.metaspace import (
    _training_groups,
    curve_trend,
    composite_loss,
    embed_datasets,
    embed_models,
    fit_input_norm,
    init_metaspace,
    load_metaspace,
    make_batch,
    median_fid,
    nearest_fid,
    predict_performance,
    rank_pairs,
    save_metaspace,
    train_metaspace,
)
from zooscout.numerics import grad_check, make_rng
from zooscout.statistics import fid_matrix
from zooscout.zoo import ZooManifest, build_zoo

SMALL = AffinitySpec(datasets=2, held_out=0, models_per_dataset=10, model_dim=12, dataset_dim=8)


def small_params(spec=SMALL, **hyper):
    return init_metaspace(spec.model_dim, spec.dataset_dim, embed_dim=8, hidden=(32,), seed=0, **hyper)


class TestRankPairs:
    def test_respects_gap(self):
        pairs = rank_pairs([0.5, 0.5, 0.9, 0.1], make_rng(0, "pairs"), min_gap=1e-4)
        perfs = np.array([0.5, 0.5, 0.9, 0.1])
        assert len(pairs) == 5
        assert all(perfs[j] - perfs[k] > 1e-4 for j, k in pairs)

    def test_capped(self):
        perfs = np.linspace(0, 1, 20)
        assert len(rank_pairs(perfs, make_rng(0, "pairs"), max_pairs=7)) == 7

    def test_flat(self):
        assert rank_pairs([0.3, 0.3, 0.3], make_rng(0, "pairs")).shape == (0, 2)


def test_median_fid_falls_back_to_one():
    assert median_fid(np.zeros((3, 3))) == 1.0
    assert median_fid(np.array([[0.0, 4.0], [4.0, 0.0]])) == 4.0


def test_nearest_fid_ignores_far_pairs():
    fids = np.array([[0.0, 1.0, 9.0], [1.0, 0.0, 8.0], [9.0, 8.0, 0.0]])
    assert nearest_fid(fids) == 1.0
    assert median_fid(fids) == 8.0
    assert nearest_fid(np.zeros((1, 1))) == 1.0
    assert nearest_fid(np.zeros((3, 3))) == 1.0


def test_single_row_norm_keeps_signal():
    shift, scale = fit_input_norm(np.array([[3.0, 4.0]]))
    np.testing.assert_array_equal(shift, [0.0, 0.0])
    assert scale == pytest.approx(np.sqrt(12.5), rel=1e-5)


class TestTraining:
    def test_perf_only_fits_small_zoo(self):
        zoo = make_affinity_zoo(SMALL, seed=0)
        assert len(zoo.manifest.entries) == 20
        trained = train_metaspace(zoo.manifest, zoo.cache, small_params(), epochs=1000, lr=1e-2, loss_set="perf")
        params = trained.params
        e = embed_models(params, zoo.cache.model_matrix(zoo.manifest.entries))
        owners = [trained.dataset_ids.index(entry.dataset_id) for entry in zoo.manifest.entries]
        pred = predict_performance(params, e, trained.dataset_embeddings[owners])
        target = np.array([entry.estimated_perf for entry in zoo.manifest.entries])
        assert np.mean((pred - target) ** 2) < 0.01
        assert curve_trend(trained.curves["total"]) < 0

    def test_embeddings_are_unit(self, trained):
        np.testing.assert_allclose(np.linalg.norm(trained.dataset_embeddings, axis=1), 1.0, atol=1e-5)
        assert trained.optimizer_steps == 20

    def test_single_dataset_skips_fid(self, caplog):
        zoo = make_affinity_zoo(SMALL, seed=0)
        only = ZooManifest([e for _, e in zoo.manifest.by_dataset("a0")], zoo.manifest.space)
        trained = train_metaspace(only, zoo.cache, small_params(), epochs=5)
        assert "skipping the FID loss" in caplog.text
        assert trained.curves["fid"] == [0.0] * 5
        np.testing.assert_allclose(np.linalg.norm(trained.dataset_embeddings, axis=1), 1.0, atol=1e-5)

    def test_sigma_rule_picks_bandwidth(self):
        spec = AffinitySpec(datasets=4, held_out=0, models_per_dataset=10, model_dim=12, dataset_dim=8)
        zoo = make_affinity_zoo(spec, seed=0)
        fids = fid_matrix([zoo.cache.datasets[d].stats for d in zoo.manifest.datasets()])
        nearest = train_metaspace(zoo.manifest, zoo.cache, small_params(spec), epochs=1)
        median = train_metaspace(zoo.manifest, zoo.cache, small_params(spec, sigma_rule="median"), epochs=1)
        assert nearest.params.sigma_fid == nearest_fid(fids)
        assert median.params.sigma_fid == median_fid(fids)
        assert nearest.params.sigma_fid < median.params.sigma_fid
        with pytest.raises(UsageError):
            train_metaspace(zoo.manifest, zoo.cache, small_params(spec, sigma_rule="mean"), epochs=1)

    def test_degenerate_zoo(self):
        zoo = make_affinity_zoo(SMALL, seed=0)
        one = ZooManifest(zoo.manifest.entries[:1], zoo.manifest.space)
        with pytest.raises(DataError):
            train_metaspace(one, zoo.cache, small_params(), epochs=1)

    def test_repeatable(self):
        zoo = make_affinity_zoo(SMALL, seed=0)
        a = train_metaspace(zoo.manifest, zoo.cache, small_params(), epochs=10)
        b = train_metaspace(zoo.manifest, zoo.cache, small_params(), epochs=10)
        np.testing.assert_array_equal(a.dataset_embeddings, b.dataset_embeddings)
        assert a.curves == b.curves

    def test_losses_come_from_the_registry(self, monkeypatch):
        calls = []
        real = LOSSES["fid"]

        def counted(*args):
            calls.append(len(args[0]))
            return real(*args)

        monkeypatch.setitem(LOSSES, "fid", counted)
        zoo = make_affinity_zoo(SMALL, seed=0)
        train_metaspace(zoo.manifest, zoo.cache, small_params(), epochs=3)
        assert calls == [2, 2, 2]


    def test_transfers_join_training_groups(self, supernets, datasets, encodings, extractor, config, caplog):
        caplog.set_level(logging.INFO, logger="zooscout.metaspace")
        manifest = build_zoo(supernets, datasets, policy="sample:6", seed=0, transfer=2)
        ids, groups = _training_groups(manifest, encodings)
        assert ids == list(datasets)
        for dataset_id, x_m, perf in groups:
            measured = manifest.transfers()[dataset_id]
            own = [e.estimated_perf for _, e in manifest.by_dataset(dataset_id)]
            assert len(x_m) == len(perf) == 6 + 2 * 2
            np.testing.assert_allclose(perf[:6], own, atol=1e-6)
            np.testing.assert_allclose(perf[6:], [measured[k] for k in sorted(measured)], atol=1e-6)
        ms = config.metaspace
        params = init_metaspace(x_m.shape[1], extractor.feature_dim, ms.embed_dim, tuple(ms.hidden), seed=0,
                                **ms.hyper())
        trained = train_metaspace(manifest, encodings, params, epochs=2)
        assert trained.dataset_ids == ids
        assert "12 transfer pairs" in caplog.text

@pytest.mark.parametrize("seed", range(5))
def test_composite_gradient(seed):
    zoo = make_affinity_zoo(SMALL, seed=seed)
    ids = zoo.manifest.datasets()
    groups = []
    for dataset_id in ids:
        entries = [e for _, e in zoo.manifest.by_dataset(dataset_id)]
        perf = np.array([e.estimated_perf for e in entries])
        groups.append((dataset_id, zoo.cache.model_matrix(entries).astype(np.float64), perf))
    inputs = np.stack([zoo.cache.datasets[d].mean for d in ids]).astype(np.float64)
    fids = fid_matrix([zoo.cache.datasets[d].stats for d in ids])
    batch = make_batch(groups, inputs, fids, make_rng(seed, "pairs"), max_pairs=8)
    params = small_params(sigma_fid=1.0, beta=2.0, temperature=0.5)
    loss_set = ("perf", "rank", "fid", "contrastive")
    _, _, _, gates = composite_loss(params, batch, loss_set)

    def f(tensors):
        p = params.with_tensors(tensors)
        total, _, grads, _ = composite_loss(p, batch, loss_set, gates)
        return total, grads

    assert grad_check(f, params.tensors(), max_coords=12, rng=make_rng(seed, "pairs", 1)) < 1e-4


def test_checkpoint_round_trip(trained, tmp_path):
    path = tmp_path / "ms.bin"
    save_metaspace(path, trained, {"zoo": "zoo.jsonl"})
    loaded, header = load_metaspace(path)
    assert header["zoo"] == "zoo.jsonl"
    assert loaded.dataset_ids == trained.dataset_ids
    assert loaded.loss_set == trained.loss_set
    x = make_rng(0, "probe").standard_normal((3, trained.params.layers["ed"][0].weight.shape[0])).astype(np.float32)
    np.testing.assert_array_equal(embed_datasets(loaded.params, x), embed_datasets(trained.params, x))
    np.testing.assert_array_equal(loaded.dataset_embeddings, trained.dataset_embeddings)
    assert loaded.params.sigma_fid == trained.params.sigma_fid


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_metaspace(tmp_path / "nope.bin")


@pytest.mark.slow
def test_affinity_zoo_retrieval_quality():
    metrics, _ = run_affinity(AffinitySpec(), ("perf", "rank", "fid"), seed=0)
    assert min(c.value for c in metrics.spearman.values()) >= 0.7
    assert metrics.max_regret <= 0.05
