from collections import Counter

import numpy as np
import pytest

from conftest import separable_dataset
from zooscout.errors import DataError, UsageError
from zooscout.numerics import grad_check, make_rng
from zooscout.supernet import (
    DIMENSIONS,
    ArchitectureConfig,
    FairnessSampler,
    SearchSpace,
    StageChoice,
    TrainSchedule,
    accuracy,
    active_channels,
    apply_mask,
    config_to_mask,
    estimate_performance,
    extract_subnet,
    forward,
    init_supernet,
    load_supernet,
    loss_and_grads,
    mask_to_config,
    param_layout,
    save_supernet,
    subnet_forward,
    train_network,
    train_supernet,
)


def random_config(space, rng):
    return ArchitectureConfig(tuple(
        StageChoice(*(space.options(dim)[rng.integers(len(space.options(dim)))] for dim in DIMENSIONS))
        for _ in range(space.stages)))


class TestSearchSpace:
    def test_default_size(self):
        space = SearchSpace()
        assert space.size() == 512
        assert len(list(space.configs())) == 512

    def test_rejects_bad_fraction(self):
        with pytest.raises(UsageError):
            SearchSpace(width_options=(0.0, 1.0)).validate()

    def test_rejects_empty_options(self):
        with pytest.raises(UsageError):
            SearchSpace(depth_options=()).validate()

    def test_round_trips_through_dict(self):
        space = SearchSpace(stages=2, base_channels=4)
        assert SearchSpace.from_dict(space.to_dict()) == space
        assert space.fingerprint() == SearchSpace.from_dict(space.to_dict()).fingerprint()

    def test_active_channels(self):
        assert active_channels(0.5, 16) == 8
        assert active_channels(1.0, 16) == 16
        assert active_channels(0.01, 4) == 1


class TestMasks:
    def test_maximal_is_all_ones(self):
        space = SearchSpace()
        mask = config_to_mask(space, space.maximal())
        assert all(m.all() for m in mask.values())

    def test_shallow_stage_zeroes_trailing_block(self):
        space = SearchSpace()
        top = space.maximal().stages[0]
        cfg = ArchitectureConfig((StageChoice(1, top.width, top.expansion),) + space.maximal().stages[1:])
        mask = config_to_mask(space, cfg)
        assert not mask["s0.b1.w1"].any() and not mask["s0.b1.w2"].any()
        assert mask["s0.b0.w1"].all()

    def test_half_width_keeps_leading_channels(self):
        space = SearchSpace(stages=1, base_channels=16)
        cfg = ArchitectureConfig((StageChoice(2, 0.5, 1.0),))
        mask = config_to_mask(space, cfg)
        down = mask["s0.down"]
        assert down[:8].all()
        assert not down[8:].any()
        assert int(down.reshape(16, -1).any(axis=1).sum()) == 8

    def test_decoder_inverts_every_default_config(self):
        space = SearchSpace()
        keys = set()
        for cfg in space.configs():
            mask = config_to_mask(space, cfg)
            assert mask_to_config(space, mask) == cfg
            keys.add(b"".join(m.tobytes() for m in mask.values()))
        assert len(keys) == space.size()

    def test_rejects_config_outside_space(self):
        space = SearchSpace()
        cfg = ArchitectureConfig((StageChoice(3, 1.0, 1.0),) * 3)
        with pytest.raises(UsageError):
            config_to_mask(space, cfg)


class TestForward:
    def test_all_ones_mask_equals_supernet(self, small_space):
        params = init_supernet(small_space, make_rng(0, "weights"))
        x = make_rng(0, "probe").standard_normal((3, 1, 8, 8)).astype(np.float32)
        mask = config_to_mask(small_space, small_space.maximal())
        np.testing.assert_array_equal(subnet_forward(params, mask, x, small_space), forward(params, x)[0])

    def test_masked_block_is_identity(self, small_space):
        params = init_supernet(small_space, make_rng(1, "weights"))
        x = make_rng(1, "probe").standard_normal((3, 1, 8, 8)).astype(np.float32)
        top = small_space.maximal().stages
        cfg = ArchitectureConfig((StageChoice(1, top[0].width, top[0].expansion),) + top[1:])
        without_block = {k: v for k, v in params.items() if not k.startswith("s0.b1.")}
        np.testing.assert_array_equal(subnet_forward(params, config_to_mask(small_space, cfg), x),
                                      forward(without_block, x)[0])

    def test_weight_sharing_matches_extracted_network(self):
        space = SearchSpace(input_shape=(1, 8, 8))
        rng = make_rng(2, "sampling")
        params = {k: v.astype(np.float64) for k, v in init_supernet(space, make_rng(2, "weights")).items()}
        for _ in range(50):
            cfg = random_config(space, rng)
            x = rng.standard_normal((2, 1, 8, 8))
            shared = subnet_forward(params, config_to_mask(space, cfg), x, space)
            standalone = forward(extract_subnet(params, space, cfg), x)[0]
            assert np.max(np.abs(shared - standalone)) < 1e-6

    def test_wrong_input_shape(self, small_space):
        params = init_supernet(small_space, make_rng(0, "weights"))
        mask = config_to_mask(small_space, small_space.maximal())
        with pytest.raises(UsageError):
            subnet_forward(params, mask, np.zeros((1, 1, 9, 9), np.float32), small_space)

    def test_misaligned_mask(self, small_space):
        params = init_supernet(small_space, make_rng(0, "weights"))
        with pytest.raises(UsageError):
            apply_mask(params, {"stem": np.ones_like(params["stem"])})


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_block_gradients(self, small_space, seed):
        rng = make_rng(seed, "sampling")
        params = {k: v.astype(np.float64) for k, v in init_supernet(small_space, make_rng(seed, "weights")).items()}
        x = rng.standard_normal((3, 1, 8, 8))
        y = rng.integers(0, small_space.num_classes, 3)
        mask = config_to_mask(small_space, random_config(small_space, rng))
        gates = forward(apply_mask(params, mask), x)[1]["gates"]

        def f(p):
            loss, grads, _, _ = loss_and_grads(p, x, y, mask, gates)
            return loss, grads

        assert grad_check(f, params, max_coords=6, rng=rng) < 1e-4

    def test_masked_parameters_get_zero_gradient(self, small_space):
        rng = make_rng(3, "sampling")
        params = init_supernet(small_space, make_rng(3, "weights"))
        x = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, small_space.num_classes, 4)
        for cfg in FairnessSampler(small_space, rng).sample_fair(8):
            mask = config_to_mask(small_space, cfg)
            _, grads, _, _ = loss_and_grads(params, x, y, mask)
            for name, g in grads.items():
                assert not g[mask[name] == 0].any()


class TestFairness:
    def test_two_options_once_each(self):
        space = SearchSpace()
        cfgs = FairnessSampler(space, make_rng(0, "sampling")).sample_fair(2)
        for s in range(space.stages):
            for dim in DIMENSIONS:
                assert sorted(getattr(c.stages[s], dim) for c in cfgs) == sorted(space.options(dim))

    def test_four_draws_twice_each(self):
        space = SearchSpace()
        cfgs = FairnessSampler(space, make_rng(1, "sampling")).sample_fair(4)
        counts = Counter(c.stages[0].width for c in cfgs)
        assert counts == {0.5: 2, 1.0: 2}

    def test_twenty_rounds_exactly_equal(self):
        space = SearchSpace()
        sampler = FairnessSampler(space, make_rng(2, "sampling"))
        cfgs = [cfg for _ in range(20) for cfg in sampler.sample_fair(2)]
        for s in range(space.stages):
            for dim in DIMENSIONS:
                counts = Counter(getattr(c.stages[s], dim) for c in cfgs)
                assert set(counts.values()) == {20}
        assert sampler.refills == 20 * space.stages * len(DIMENSIONS)

    def test_n_must_be_positive(self):
        with pytest.raises(UsageError):
            FairnessSampler(SearchSpace(), make_rng(0, "sampling")).sample_fair(0)


class TestTraining:
    def test_schedule_validation(self):
        with pytest.raises(UsageError):
            TrainSchedule(stage1_epochs=0).validate()
        schedule = TrainSchedule.from_total(10)
        assert (schedule.stage1_epochs, schedule.stage2_epochs) == (4, 6)

    def test_stage_one_only_is_plain_training(self):
        space = SearchSpace(stages=1, base_channels=4, input_shape=(1, 8, 8), num_classes=2)
        ds = separable_dataset()
        a = init_supernet(space, make_rng(0, "weights"))
        b = {k: v.copy() for k, v in a.items()}
        train_supernet(a, space, ds, TrainSchedule(stage1_epochs=2, stage2_epochs=0), make_rng(0, "train"))
        train_network(b, ds.split("train"), ds.split("val"), 2, make_rng(0, "train"))
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_separable_data_is_learned(self):
        space = SearchSpace(stages=1, base_channels=4, input_shape=(1, 8, 8), num_classes=2)
        ds = separable_dataset()
        params = init_supernet(space, make_rng(0, "weights"))
        result = train_supernet(params, space, ds, TrainSchedule(stage1_epochs=10, stage2_epochs=0),
                                make_rng(0, "train"))
        assert result.log[-1].val_acc >= 0.95
        assert result.optimizer.step == 10 * int(np.ceil(len(ds.splits["train"]) / 32))

    def test_two_stage_log(self):
        space = SearchSpace(stages=1, base_channels=4, input_shape=(1, 8, 8), num_classes=2)
        params = init_supernet(space, make_rng(0, "weights"))
        result = train_supernet(params, space, separable_dataset(), TrainSchedule(1, 2, subnets_per_batch=2),
                                make_rng(0, "train"))
        assert [r.stage for r in result.log] == [1, 2, 2]

    def test_resumed_optimizer_keeps_counting(self):
        space = SearchSpace(stages=1, base_channels=4, input_shape=(1, 8, 8), num_classes=2)
        ds = separable_dataset()
        params = extract_subnet(init_supernet(space, make_rng(0, "weights")), space, space.maximal())
        per_epoch = int(np.ceil(len(ds.splits["train"]) / 32))
        first = train_network(params, ds.split("train"), ds.split("val"), 1, make_rng(0, "train"))
        assert first.optimizer.step == per_epoch
        second = train_network(params, ds.split("train"), ds.split("val"), 1, make_rng(0, "train"),
                               state=first.optimizer)
        assert second.optimizer is first.optimizer
        assert second.optimizer.step == 2 * per_epoch


class TestPerformance:
    def test_constant_prediction_is_chance(self):
        space = SearchSpace(stages=1, base_channels=4, input_shape=(1, 8, 8), num_classes=2)
        params = init_supernet(space, make_rng(0, "weights"))
        params["head.w"][:] = 0
        params["head.b"][:] = [1.0, 0.0]
        ds = separable_dataset()
        assert estimate_performance(params, config_to_mask(space, space.maximal()), ds.split("val")) == 0.5

    def test_repeatable(self, small_space):
        params = init_supernet(small_space, make_rng(0, "weights"))
        rng = make_rng(0, "probe")
        split = (rng.standard_normal((12, 1, 8, 8)).astype(np.float32), rng.integers(0, 3, 12))
        mask = config_to_mask(small_space, small_space.maximal())
        assert estimate_performance(params, mask, split) == estimate_performance(params, mask, split)

    def test_empty_split(self, small_space):
        params = init_supernet(small_space, make_rng(0, "weights"))
        with pytest.raises(DataError):
            accuracy(params, np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64))


def test_checkpoint_round_trip(tmp_path, small_space):
    params = init_supernet(small_space, make_rng(0, "weights"))
    path = tmp_path / "net.sn"
    save_supernet(path, params, small_space, {"dataset_id": "d0", "optimizer_steps": 7})
    ckpt = load_supernet(path)
    assert ckpt.space == small_space
    assert ckpt.dataset_id == "d0"
    assert ckpt.meta["optimizer_steps"] == 7
    assert set(ckpt.params) == set(param_layout(small_space))
    for name, p in params.items():
        np.testing.assert_array_equal(ckpt.params[name], p)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_supernet(tmp_path / "nope.sn")
