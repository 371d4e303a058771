import numpy as np
import pytest

from zooscout.dataio import DatasetDescriptor, SyntheticFamilySpec, gen_synthetic
from zooscout.encoding import (
    EncodingCache,
    FrozenExtractor,
    dataset_fid,
    encode_architecture,
    encode_dataset,
    encode_functional,
    encode_model,
    make_probe,
)
from zooscout.errors import DataError, UsageError
from zooscout.numerics import make_rng
from zooscout.supernet import ArchitectureConfig, SearchSpace, StageChoice, config_to_mask, init_supernet


def arch(*rows):
    return ArchitectureConfig(tuple(StageChoice(*r) for r in rows))


class TestArchitecture:
    def test_layout(self):
        cfg = arch((1, 0.5, 1.0), (2, 1.0, 1.0), (1, 0.5, 0.5))
        vec = encode_architecture(SearchSpace(), cfg)
        np.testing.assert_array_equal(vec, [1, 0.5, 1, 2, 1, 1, 1, 0.5, 0.5])
        assert vec.dtype == np.float32

    def test_outside_space(self):
        with pytest.raises(UsageError):
            encode_architecture(SearchSpace(), arch((3, 1.0, 1.0), (1, 1.0, 1.0), (1, 1.0, 1.0)))


class TestFunctional:
    def setup_method(self):
        self.space = SearchSpace(stages=2, base_channels=4, input_shape=(1, 8, 8))
        self.params = init_supernet(self.space, make_rng(0, "weights"))
        self.probe = make_probe(self.space, n_z=4, seed=0)
        self.cfg = arch((1, 0.5, 0.5), (2, 1.0, 1.0))

    def test_repeatable(self):
        a = encode_model(self.space, self.params, self.cfg, self.probe).vector()
        b = encode_model(self.space, self.params, self.cfg, make_probe(self.space, n_z=4, seed=0)).vector()
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3 * 2 + self.space.stage_channels(1),)

    def test_masked_block_does_not_matter(self):
        mask = config_to_mask(self.space, self.cfg)
        before = encode_functional(self.params, mask, self.probe)
        params = dict(self.params)
        params["s0.b1.w1"] = params["s0.b1.w1"] + 5.0
        params["s0.b1.w2"] = params["s0.b1.w2"] - 3.0
        np.testing.assert_array_equal(encode_functional(params, mask, self.probe), before)

    def test_probe_is_frozen(self):
        with pytest.raises(ValueError):
            self.probe.z[0, 0, 0, 0] = 1.0

    def test_channel_mismatch(self):
        probe = make_probe(SearchSpace(input_shape=(3, 8, 8)), n_z=2)
        with pytest.raises(UsageError):
            encode_functional(self.params, config_to_mask(self.space, self.cfg), probe)


def constant_dataset(n, value, dataset_id="flat"):
    images = np.full((n, 1, 8, 8), value, dtype=np.uint8)
    return DatasetDescriptor(dataset_id, images, np.arange(n) % 2, 2)


class TestDataset:
    extractor = FrozenExtractor((1, 8, 8), feature_dim=6, seed=0)

    def test_identical_images(self):
        enc = encode_dataset(constant_dataset(10, 120), self.extractor, 64, make_rng(0, "sampling"))
        np.testing.assert_allclose(enc.stats.cov, 1e-6 * np.eye(6), atol=1e-12)
        assert enc.size == 10

    def test_fid_of_identical_datasets(self):
        a = constant_dataset(20, 90, "a")
        b = constant_dataset(20, 90, "b")
        assert dataset_fid(a, b, self.extractor, n_img=64) == pytest.approx(0.0, abs=1e-9)

    def test_order_independent(self, datasets):
        ds = datasets["d0"]
        perm = make_rng(1, "sampling").permutation(len(ds))
        shuffled = DatasetDescriptor("d0", ds.images[perm], ds.labels[perm], ds.classes)
        extractor = FrozenExtractor(ds.input_shape, feature_dim=6, seed=0)
        a = encode_dataset(ds, extractor, len(ds), make_rng(0, "sampling"))
        b = encode_dataset(shuffled, extractor, len(ds), make_rng(0, "sampling"))
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-6)
        np.testing.assert_allclose(a.stats.cov, b.stats.cov, atol=1e-6)

    def test_duplicated_dataset_keeps_mean(self, datasets):
        ds = datasets["d0"]
        doubled = DatasetDescriptor("d0x2", np.concatenate([ds.images, ds.images]),
                                    np.concatenate([ds.labels, ds.labels]), ds.classes)
        extractor = FrozenExtractor(ds.input_shape, feature_dim=6, seed=0)
        a = encode_dataset(ds, extractor, len(doubled), make_rng(0, "sampling"))
        b = encode_dataset(doubled, extractor, len(doubled), make_rng(0, "sampling"))
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-6)

    def test_empty(self):
        empty = DatasetDescriptor("empty", np.zeros((0, 1, 8, 8), np.uint8), np.zeros(0), 2)
        with pytest.raises(DataError):
            encode_dataset(empty, self.extractor, 8, make_rng(0, "sampling"))

    def test_single_image(self):
        with pytest.raises(DataError, match="at least 2 images"):
            encode_dataset(constant_dataset(1, 100), self.extractor, 8, make_rng(0, "sampling"))
        with pytest.raises(DataError):
            encode_dataset(constant_dataset(10, 100), self.extractor, 1, make_rng(0, "sampling"))

    def test_disjoint_halves_agree(self):
        ds = gen_synthetic(SyntheticFamilySpec(image_shape=(1, 8, 8)), 2000, make_rng(0, "data"), "big")
        halves = [DatasetDescriptor(f"half{i}", ds.images[i::2], ds.labels[i::2], ds.classes) for i in (0, 1)]
        a, b = (encode_dataset(h, self.extractor, len(h), make_rng(0, "sampling")) for h in halves)
        assert a.size == b.size == 1000
        assert np.linalg.norm(a.mean - b.mean) / np.linalg.norm(a.mean) < 0.1

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            self.extractor.features(np.zeros((2, 1, 16, 16), np.uint8))


class TestCache:
    def test_covers_zoo(self, zoo, encodings):
        assert encodings.model_matrix(zoo.entries).shape[0] == len(zoo.entries)
        assert set(encodings.datasets) == set(zoo.datasets())

    def test_round_trip(self, encodings, tmp_path):
        path = tmp_path / "zoo.enc"
        encodings.save(path)
        loaded = EncodingCache.load(path)
        assert set(loaded.models) == set(encodings.models)
        for key, vec in encodings.models.items():
            np.testing.assert_array_equal(loaded.models[key], vec)
        for d, enc in encodings.datasets.items():
            np.testing.assert_array_equal(loaded.datasets[d].mean, enc.mean)
            np.testing.assert_allclose(loaded.datasets[d].stats.cov, enc.stats.cov, atol=1e-6)

    def test_missing_key_list(self, encodings, tmp_path):
        path = tmp_path / "zoo.enc"
        encodings.save(path)
        path.with_name("zoo.enc.json").unlink()
        with pytest.raises(DataError):
            EncodingCache.load(path)

    def test_unknown_entry(self, zoo):
        with pytest.raises(DataError):
            EncodingCache().model_matrix(zoo.entries[:1])
