import json

import numpy as np
import pytest

from carpetbomb.core import Image, Patch, Placement
from carpetbomb.errors import ValidationError
from carpetbomb.forensics import (
    channel_distance_profile,
    channel_distances,
    checkpoint_drift,
    frequency_bins,
    identity_applier,
    patch_applier,
    relative_profile,
    spatial_impact_map,
    top_attacked_channels,
    write_bins_csv,
    write_drift_json,
    write_map_json,
    write_profile_csv,
)
from carpetbomb.toy import fresh_toy_net, make_toy_dataset, toy_handle


@pytest.fixture(scope="module")
def images():
    return make_toy_dataset(10, seed=60).images


@pytest.fixture(scope="module")
def handle():
    return toy_handle(fresh_toy_net(seed=9))


@pytest.fixture(scope="module")
def small_patch():
    rng = np.random.default_rng(0)
    return Patch(rng.random((8, 8, 3)).astype(np.float32))


PLACEMENT = Placement("top_left_offset", 8, 8, 2, 2)


def brute_profile(handle, layer, images, applier):
    """Per-channel mean of per-image L2 distances, plain loops."""
    acc = None
    for x in images:
        clean = handle.extract_features(x, [layer])[layer].astype(np.float64)
        adv = handle.extract_features(applier(x), [layer])[layer].astype(np.float64)
        d = np.zeros(clean.shape[0])
        for k in range(clean.shape[0]):
            ssq = 0.0
            for i in range(clean.shape[1]):
                for j in range(clean.shape[2]):
                    ssq += (adv[k, i, j] - clean[k, i, j]) ** 2
            d[k] = np.sqrt(ssq)
        acc = d if acc is None else acc + d
    return acc / len(images)


def brute_impact(handle, layer, images, applier):
    acc = None
    for x in images:
        clean = handle.extract_features(x, [layer])[layer].astype(np.float64)
        adv = handle.extract_features(applier(x), [layer])[layer].astype(np.float64)
        cell = np.zeros(clean.shape[1:])
        for i in range(clean.shape[1]):
            for j in range(clean.shape[2]):
                ssq = 0.0
                for k in range(clean.shape[0]):
                    ssq += (adv[k, i, j] - clean[k, i, j]) ** 2
                cell[i, j] = np.sqrt(ssq)
        acc = cell if acc is None else acc + cell
    return acc / len(images)


class TestTopAttacked:
    def test_identity_gives_tie_broken_prefix(self, handle, images):
        assert top_attacked_channels(handle, "block3", images[0], images[0], 5) == [0, 1, 2, 3, 4]

    def test_constructed_distances_on_input_layer(self, handle):
        # at the identity "input" site the per-channel distance is fully
        # controllable: distances (0.5, 2.0, 1.0) -> top-2 = [1, 2]
        base = np.full((4, 4, 3), 0.4, dtype=np.float32)
        shifted = base.copy()
        for c, target in enumerate((0.5, 2.0, 1.0)):
            shifted[:, :, c] += target / 4.0  # ||const 0.25*t over 16 cells||_2 = t
        x = Image(np.pad(base, ((0, 28), (0, 28), (0, 0))))
        x_adv = Image(np.pad(shifted, ((0, 28), (0, 28), (0, 0))))
        d = channel_distances(handle, "input", x, x_adv)
        np.testing.assert_allclose(d, [0.5, 2.0, 1.0], rtol=1e-5)
        assert top_attacked_channels(handle, "input", x, x_adv, 2) == [1, 2]

    def test_k_equal_to_channels_is_permutation(self, handle, images, small_patch):
        adv = patch_applier(small_patch, PLACEMENT)(images[0])
        got = top_attacked_channels(handle, "block3", images[0], adv, 64)
        assert sorted(got) == list(range(64))

    def test_k_too_large_rejected(self, handle, images):
        with pytest.raises(ValidationError, match="exceeds"):
            top_attacked_channels(handle, "block3", images[0], images[0], 65)


class TestFrequencyBins:
    def test_single_image_binary_p(self, handle, images, small_patch):
        bins = frequency_bins(
            handle, "block3", images[:1], patch_applier(small_patch, PLACEMENT), k=10
        )
        assert set(np.unique(bins.p)) <= {0.0, 1.0}
        assert bins.frequent == 10
        assert bins.never == 54

    def test_threshold_binning_arithmetic(self, handle, images, small_patch):
        bins = frequency_bins(
            handle, "block3", images[:5], patch_applier(small_patch, PLACEMENT), k=10
        )
        assert bins.frequent + bins.occasional + bins.never == 64
        recount_frequent = int((bins.p >= 0.5).sum())
        recount_never = int((bins.p == 0).sum())
        assert bins.frequent == recount_frequent
        assert bins.never == recount_never

    def test_counts_partition_on_random_data(self, handle, images, small_patch):
        bins = frequency_bins(
            handle, "block3", images, patch_applier(small_patch, PLACEMENT), k=50
        )
        assert sum(bins.counts) == 64
        assert (bins.p >= 0).all() and (bins.p <= 1).all()

    def test_empty_set_rejected(self, handle, small_patch):
        with pytest.raises(ValidationError, match="at least one"):
            frequency_bins(handle, "block3", [], patch_applier(small_patch, PLACEMENT))


class TestDistanceProfile:
    def test_identity_attack_all_zero(self, handle, images):
        profile = channel_distance_profile(handle, "block3", images[:4], identity_applier)
        np.testing.assert_array_equal(profile.values, np.zeros(64))
        assert profile.sample_count == 4

    def test_single_image_equals_distances(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images[:1], applier)
        d = channel_distances(handle, "block3", images[0], applier(images[0]))
        np.testing.assert_allclose(profile.values, d, rtol=1e-12)

    def test_matches_brute_force_accumulation(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images, applier)
        want = brute_profile(handle, "block3", images, applier)
        np.testing.assert_allclose(profile.values, want, rtol=1e-6)

    def test_sorted_view_order_and_highlight(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images[:3], applier)
        rows = profile.sorted_view(highlight={7})
        values = [r[2] for r in rows]
        assert values == sorted(values, reverse=True)
        flags = {r[0]: r[3] for r in rows}
        assert flags[7] is True and sum(flags.values()) == 1


class TestRelativeProfile:
    def test_equal_profiles_near_one(self):
        a = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(relative_profile(a, a), np.ones(3), rtol=1e-9)

    def test_tenfold_channel(self):
        unforced = np.array([1.0, 1.0])
        forced = np.array([10.0, 1.0])
        ratios = relative_profile(forced, unforced)
        assert ratios[0] == pytest.approx(10.0, rel=1e-9)

    def test_zero_over_zero_is_zero(self):
        ratios = relative_profile(np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(ratios, np.zeros(3))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="mismatch"):
            relative_profile(np.zeros(3), np.zeros(4))


class TestImpactMap:
    def test_identity_zero_map(self, handle, images):
        impact = spatial_impact_map(handle, "block3", images[:4], identity_applier)
        np.testing.assert_array_equal(impact.values, np.zeros((4, 4)))

    def test_localized_at_input_layer(self, handle, images):
        # 1x1 receptive field: a one-pixel patch shows up in exactly one cell
        one = Patch(np.ones((1, 1, 3), dtype=np.float32))
        placement = Placement("top_left_offset", 1, 1, 20, 11)
        impact = spatial_impact_map(handle, "input", images[:3], patch_applier(one, placement))
        nonzero = np.argwhere(impact.values > 0)
        assert nonzero.tolist() == [[20, 11]]

    def test_matches_brute_force(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        impact = spatial_impact_map(handle, "block3", images, applier)
        want = brute_impact(handle, "block3", images, applier)
        np.testing.assert_allclose(impact.values, want, rtol=1e-6)

    def test_empty_set_rejected(self, handle, small_patch):
        with pytest.raises(ValidationError, match="at least one"):
            spatial_impact_map(handle, "block3", [], patch_applier(small_patch, PLACEMENT))


class TestCheckpointDrift:
    def test_baseline_overlap_is_one(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images[:4], applier)
        baseline = profile.top_channels(12)
        points = checkpoint_drift(
            [handle], "block3", images[:4], small_patch, PLACEMENT, baseline
        )
        assert len(points) == 1
        assert points[0].overlap == 1.0

    def test_random_reinit_overlap_near_hypergeometric(self, handle, images, small_patch):
        applier = patch_applier(small_patch, PLACEMENT)
        baseline = channel_distance_profile(handle, "block3", images[:4], applier).top_channels(16)
        others = [toy_handle(fresh_toy_net(seed=s)) for s in (21, 22, 23, 24, 25)]
        points = checkpoint_drift(others, "block3", images[:4], small_patch, PLACEMENT, baseline)
        overlaps = [p.overlap for p in points]
        # hypergeometric expectation: E|A&B| = 16*16/64 = 4 -> Jaccard ~ 4/28
        expected = 4 / 28
        assert all(o < 0.6 for o in overlaps)
        assert abs(float(np.mean(overlaps)) - expected) < 0.15

    def test_incompatible_layer_width_rejected(self, handle, images, small_patch):
        narrow = toy_handle(fresh_toy_net(seed=5, widths=(8, 16, 24)))
        baseline = list(range(10))
        with pytest.raises(ValidationError, match="channels"):
            checkpoint_drift(
                [handle, narrow], "block3", images[:2], small_patch, PLACEMENT, baseline
            )

    def test_empty_inputs_rejected(self, handle, images, small_patch):
        with pytest.raises(ValidationError, match="at least one"):
            checkpoint_drift([], "block3", images[:2], small_patch, PLACEMENT, [0])
        with pytest.raises(ValidationError, match="empty"):
            checkpoint_drift([handle], "block3", images[:2], small_patch, PLACEMENT, [])


class TestEmission:
    def test_profile_csv(self, handle, images, small_patch, tmp_path):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images[:3], applier)
        path = write_profile_csv(tmp_path / "p.csv", profile, highlight={1, 2})
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "channel,index,value,highlight"
        assert len(lines) == 65

    def test_csv_and_json_deterministic(self, handle, images, small_patch, tmp_path):
        applier = patch_applier(small_patch, PLACEMENT)
        profile = channel_distance_profile(handle, "block3", images[:3], applier)
        a = write_profile_csv(tmp_path / "a.csv", profile).read_bytes()
        b = write_profile_csv(tmp_path / "b.csv", profile).read_bytes()
        assert a == b
        impact = spatial_impact_map(handle, "block3", images[:3], applier)
        ja = write_map_json(tmp_path / "a.json", impact).read_bytes()
        jb = write_map_json(tmp_path / "b.json", impact).read_bytes()
        assert ja == jb

    def test_bins_csv_and_drift_json(self, handle, images, small_patch, tmp_path):
        applier = patch_applier(small_patch, PLACEMENT)
        bins = frequency_bins(handle, "block3", images[:3], applier, k=10)
        path = write_bins_csv(tmp_path / "bins.csv", bins)
        assert path.read_text().startswith("channel,index,value")
        baseline = channel_distance_profile(handle, "block3", images[:2], applier).top_channels(8)
        points = checkpoint_drift([handle], "block3", images[:2], small_patch, PLACEMENT, baseline)
        dpath = write_drift_json(tmp_path / "drift.json", points)
        payload = json.loads(dpath.read_text())
        assert payload[0]["overlap"] == 1.0
        assert len(payload[0]["profile"]) == 64
