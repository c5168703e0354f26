import numpy as np
import pytest

from carpetbomb.core import NoiseBudget, Placement
from carpetbomb.errors import ValidationError
from carpetbomb.forge import (
    CleanFeatureCache,
    CraftConfig,
    LossTrace,
    NoiseCraftConfig,
    craft_carpet_patch,
    craft_feature_noise_tmifgsm,
    craft_forced,
    craft_task_patch,
    feature_masks_for,
)
from carpetbomb.losses import CombinedLossConfig, FeatureTargetSpec, feature_loss
from carpetbomb.toy import make_toy_dataset

PLACEMENT = Placement("top_left_offset", 10, 10, 5, 5)
SPEC = FeatureTargetSpec(layers=("block3",))

TINY = CraftConfig(steps=2, iterations_per_step=20, updates_per_image=5, seed=0)


@pytest.fixture(scope="module")
def stream():
    return make_toy_dataset(12, seed=50).images


class TestCraftConfig:
    def test_zero_steps_rejected(self):
        with pytest.raises(ValidationError, match="steps"):
            CraftConfig(steps=0)

    def test_schedule_divisibility(self):
        with pytest.raises(ValidationError, match="multiple"):
            CraftConfig(iterations_per_step=105, updates_per_image=10)

    def test_momentum_range(self):
        with pytest.raises(ValidationError, match="momentum"):
            CraftConfig(momentum=1.0)

    def test_defaults_match_schedule(self):
        cfg = CraftConfig()
        assert cfg.steps == 100
        assert cfg.iterations_per_step == 1000
        assert cfg.updates_per_image == 10
        assert cfg.visits_per_step == 100
        assert cfg.momentum == 0.9
        assert cfg.minibatch == 1

    def test_noise_defaults(self):
        ncfg = NoiseCraftConfig()
        assert ncfg.epsilon == pytest.approx(8 / 255)
        assert ncfg.step_size == pytest.approx(ncfg.epsilon / 10)
        assert ncfg.steps == 100
        assert ncfg.momentum_decay == 1.0

    def test_noise_step_size_bound(self):
        with pytest.raises(ValidationError, match="step_size"):
            NoiseCraftConfig(epsilon=0.1, step_size=0.2)


class TestCarpetPatch:
    def test_zero_learning_rate_keeps_init(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1, iterations_per_step=10, updates_per_image=5, learning_rate=0.0, seed=1
        )
        patch, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        np.testing.assert_array_equal(patch.data, np.zeros((10, 10, 3), dtype=np.float32))

    def test_zero_lr_uniform_init_preserved(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1,
            iterations_per_step=5,
            updates_per_image=5,
            learning_rate=0.0,
            init="uniform_random",
            seed=7,
        )
        patch, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        import torch

        gen = torch.Generator().manual_seed(7)
        want = torch.rand((3, 10, 10), generator=gen).numpy().transpose(1, 2, 0)
        np.testing.assert_array_equal(patch.data, want.astype(np.float32))

    def test_single_image_ascent_increases_loss(self, fresh_handle, stream):
        cfg = CraftConfig(steps=4, iterations_per_step=50, updates_per_image=10, seed=2)
        patch, trace = craft_carpet_patch(fresh_handle, stream[:1], PLACEMENT, SPEC, cfg)
        assert trace.mean_loss[-1] > trace.mean_loss[0]
        # and the final patch really does beat the all-zeros init on that image
        from carpetbomb.core import Patch, apply_patch

        masks = feature_masks_for(fresh_handle, SPEC, (32, 32), PLACEMENT)
        x = stream[0]
        init_adv = apply_patch(x, Patch(np.zeros((10, 10, 3), dtype=np.float32)), PLACEMENT)
        final_adv = apply_patch(x, patch, PLACEMENT)
        assert feature_loss(fresh_handle, x, final_adv, SPEC, masks) > feature_loss(
            fresh_handle, x, init_adv, SPEC, masks
        )

    def test_trace_first_step_matches_value_path(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1, iterations_per_step=1, updates_per_image=1, learning_rate=0.0, seed=3
        )
        _, trace = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        from carpetbomb.core import Patch, apply_patch

        order = np.random.default_rng(3).permutation(len(stream))
        x = stream[int(order[0])]
        masks = feature_masks_for(fresh_handle, SPEC, (32, 32), PLACEMENT)
        x_adv = apply_patch(x, Patch(np.zeros((10, 10, 3), dtype=np.float32)), PLACEMENT)
        want = feature_loss(fresh_handle, x, x_adv, SPEC, masks)
        assert trace.mean_loss[0] == pytest.approx(want, rel=1e-4)

    def test_determinism_bytes(self, fresh_handle, stream):
        a, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, TINY)
        b, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, TINY)
        assert a.data.tobytes() == b.data.tobytes()

    def test_stream_images_not_mutated(self, fresh_handle, stream):
        before = [img.data.copy() for img in stream]
        craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, TINY)
        for img, snapshot in zip(stream, before):
            np.testing.assert_array_equal(img.data, snapshot)

    def test_patch_in_unit_range(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1, iterations_per_step=10, updates_per_image=5, learning_rate=5.0, seed=4
        )
        patch, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        assert patch.data.min() >= 0.0 and patch.data.max() <= 1.0

    def test_empty_stream_rejected(self, fresh_handle):
        with pytest.raises(ValidationError, match="empty"):
            craft_carpet_patch(fresh_handle, [], PLACEMENT, SPEC, TINY)

    def test_mixed_shapes_rejected(self, fresh_handle, stream, rand_image):
        bad = stream[:2] + [rand_image(0, h=16, w=16)]
        with pytest.raises(ValidationError, match="shape"):
            craft_carpet_patch(fresh_handle, bad, PLACEMENT, SPEC, TINY)

    def test_adam_variant_runs_and_is_deterministic(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1,
            iterations_per_step=10,
            updates_per_image=5,
            optimizer_kind="adam",
            adam_lr=0.5,
            seed=5,
        )
        a, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        b, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.data.min() >= 0.0 and a.data.max() <= 1.0

    def test_minibatch_two(self, fresh_handle, stream):
        cfg = CraftConfig(
            steps=1, iterations_per_step=10, updates_per_image=5, minibatch=2, seed=6
        )
        patch, trace = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, cfg)
        assert patch.data.shape == (10, 10, 3)
        assert len(trace.mean_loss) == 1


class TestTaskPatch:
    def test_zero_lr_keeps_init(self, fresh_handle, stream):
        labels = list(range(len(stream)))
        labels = [l % 10 for l in labels]
        cfg = CraftConfig(
            steps=1, iterations_per_step=10, updates_per_image=5, learning_rate=0.0, seed=1
        )
        patch, _ = craft_task_patch(fresh_handle, stream, labels, PLACEMENT, cfg)
        np.testing.assert_array_equal(patch.data, np.zeros((10, 10, 3), dtype=np.float32))

    def test_label_misalignment_rejected(self, fresh_handle, stream):
        with pytest.raises(ValidationError, match="align"):
            craft_task_patch(fresh_handle, stream, [1, 2], PLACEMENT, TINY)

    def test_encoder_only_rejected(self, stream):
        from carpetbomb.toy import fresh_toy_net, toy_handle

        encoder = toy_handle(fresh_toy_net(seed=3), task="none")
        with pytest.raises(ValidationError, match="task head"):
            craft_task_patch(encoder, stream, [0] * len(stream), PLACEMENT, TINY)

    def test_ascent_increases_task_loss(self, fresh_handle, stream):
        # the untrained head is nearly flat, so ascend with a generous rate
        labels = [i % 10 for i in range(len(stream))]
        cfg = CraftConfig(
            steps=4, iterations_per_step=30, updates_per_image=10, learning_rate=2.0, seed=2
        )
        _, trace = craft_task_patch(fresh_handle, stream[:1], labels[:1], PLACEMENT, cfg)
        assert trace.mean_loss[-1] > trace.mean_loss[0]


class TestTmifgsmNoise:
    def test_zero_steps_zero_noise(self, fresh_handle, stream):
        ncfg = NoiseCraftConfig(steps=0)
        noise, trace = craft_feature_noise_tmifgsm(fresh_handle, stream, SPEC, ncfg)
        np.testing.assert_array_equal(noise.data, np.zeros((32, 32, 3), dtype=np.float32))
        assert trace.mean_loss == []

    def test_projection_exact(self, fresh_handle, stream):
        ncfg = NoiseCraftConfig(epsilon=8 / 255, steps=12, seed=1)
        noise, _ = craft_feature_noise_tmifgsm(fresh_handle, stream, SPEC, ncfg)
        assert np.abs(noise.data).max() <= np.float32(8 / 255)

    def test_loss_increases(self, fresh_handle, stream):
        # single-image stream so successive trace entries are comparable
        ncfg = NoiseCraftConfig(epsilon=16 / 255, steps=30, seed=2)
        _, trace = craft_feature_noise_tmifgsm(fresh_handle, stream[:1], SPEC, ncfg)
        assert trace.mean_loss[-1] > trace.mean_loss[0]

    def test_determinism(self, fresh_handle, stream):
        ncfg = NoiseCraftConfig(steps=8, seed=3)
        a, _ = craft_feature_noise_tmifgsm(fresh_handle, stream, SPEC, ncfg)
        b, _ = craft_feature_noise_tmifgsm(fresh_handle, stream, SPEC, ncfg)
        assert a.data.tobytes() == b.data.tobytes()

    def test_combined_objective_needs_labels(self, fresh_handle, stream):
        ncfg = NoiseCraftConfig(steps=2)
        with pytest.raises(ValidationError, match="labels"):
            craft_feature_noise_tmifgsm(
                fresh_handle,
                stream,
                SPEC,
                ncfg,
                combined=CombinedLossConfig(eta=1.0, task_loss_kind="cross_entropy"),
            )

    def test_combined_objective_runs(self, fresh_handle, stream):
        ncfg = NoiseCraftConfig(steps=4, seed=4)
        labels = [i % 10 for i in range(len(stream))]
        noise, trace = craft_feature_noise_tmifgsm(
            fresh_handle,
            stream,
            SPEC,
            ncfg,
            labels=labels,
            combined=CombinedLossConfig(eta=0.5, task_loss_kind="cross_entropy"),
        )
        assert len(trace.mean_loss) == 4
        assert np.abs(noise.data).max() <= np.float32(ncfg.epsilon)


class TestForced:
    def test_full_channel_set_reproduces_carpet_bit_for_bit(self, fresh_handle, stream):
        explicit = FeatureTargetSpec(layers=("block3",), channels={"block3": tuple(range(64))})
        a, _ = craft_carpet_patch(fresh_handle, stream, PLACEMENT, SPEC, TINY)
        b, _ = craft_forced(fresh_handle, stream, PLACEMENT, explicit, TINY)
        assert a.data.tobytes() == b.data.tobytes()

    def test_requires_explicit_channels(self, fresh_handle, stream):
        with pytest.raises(ValidationError, match="explicit channel set"):
            craft_forced(fresh_handle, stream, PLACEMENT, SPEC, TINY)

    def test_single_channel_trace_matches_value_path(self, fresh_handle, stream):
        spec1 = FeatureTargetSpec(layers=("block3",), channels={"block3": (11,)})
        cfg = CraftConfig(
            steps=1, iterations_per_step=1, updates_per_image=1, learning_rate=0.0, seed=3
        )
        _, trace = craft_forced(fresh_handle, stream, PLACEMENT, spec1, cfg)
        from carpetbomb.core import Patch, apply_patch

        order = np.random.default_rng(3).permutation(len(stream))
        x = stream[int(order[0])]
        masks = feature_masks_for(fresh_handle, spec1, (32, 32), PLACEMENT)
        x_adv = apply_patch(x, Patch(np.zeros((10, 10, 3), dtype=np.float32)), PLACEMENT)
        want = feature_loss(fresh_handle, x, x_adv, spec1, masks)
        assert trace.mean_loss[0] == pytest.approx(want, rel=1e-4)

    def test_channel_out_of_range_rejected(self, fresh_handle, stream):
        bad = FeatureTargetSpec(layers=("block3",), channels={"block3": (99,)})
        with pytest.raises(ValidationError, match="out of range"):
            craft_forced(fresh_handle, stream, PLACEMENT, bad, TINY)

    def test_noise_dispatch(self, fresh_handle, stream):
        spec1 = FeatureTargetSpec(layers=("block3",), channels={"block3": (0, 1)})
        ncfg = NoiseCraftConfig(steps=3, seed=5)
        noise, _ = craft_forced(fresh_handle, stream, NoiseBudget(ncfg.epsilon), spec1, ncfg)
        assert np.abs(noise.data).max() <= np.float32(ncfg.epsilon)

    def test_budget_config_mismatch_rejected(self, fresh_handle, stream):
        spec1 = FeatureTargetSpec(layers=("block3",), channels={"block3": (0,)})
        with pytest.raises(ValidationError, match="disagree"):
            craft_forced(
                fresh_handle, stream, NoiseBudget(0.1), spec1, NoiseCraftConfig(epsilon=0.2)
            )

    def test_cfg_kind_mismatch_rejected(self, fresh_handle, stream):
        spec1 = FeatureTargetSpec(layers=("block3",), channels={"block3": (0,)})
        with pytest.raises(ValidationError, match="CraftConfig"):
            craft_forced(fresh_handle, stream, PLACEMENT, spec1, NoiseCraftConfig())


class TestCache:
    def test_disk_cache_round_trip(self, fresh_handle, stream, tmp_path):
        cache = CleanFeatureCache(fresh_handle, ["block3"], cache_dir=str(tmp_path))
        first = cache.get(0, stream[0])["block3"]
        files = list(tmp_path.glob("*.npz"))
        assert len(files) == 1
        fresh = CleanFeatureCache(fresh_handle, ["block3"], cache_dir=str(tmp_path))
        again = fresh.get(0, stream[0])["block3"]
        np.testing.assert_array_equal(first.numpy(), again.numpy())

    def test_unidentified_images_not_persisted(self, fresh_handle, tmp_path, rand_image):
        cache = CleanFeatureCache(fresh_handle, ["block3"], cache_dir=str(tmp_path))
        cache.get(0, rand_image(0, id=""))
        assert list(tmp_path.glob("*.npz")) == []


class TestLossTrace:
    def test_json_round_trip(self, tmp_path):
        trace = LossTrace()
        trace.record(0, 1.5)
        trace.record(1, 2.25)
        path = trace.save(tmp_path / "trace.json")
        import json

        rows = json.loads(path.read_text())
        assert rows == [
            {"step": 0, "mean_loss": 1.5},
            {"step": 1, "mean_loss": 2.25},
        ]
