"""Feature-impact analyses: top-attacked channels, selection-frequency
binning, channel-distance profiles, forced-vs-unforced ratios, spatial
impact maps, and checkpoint-drift traces.

Distances here are computed without the feature mask: the on-patch
activation spike is itself part of the observation (impact maps exist to
show it). All aggregations are plain means over images with a fixed
reduction order, so identical inputs reproduce identical outputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Image, Noise, Patch, Placement, apply_noise, apply_patch
from .errors import ValidationError
from .models import ModelHandle

AttackApplier = Callable[[Image], Image]


def patch_applier(patch: Patch, placement: Placement) -> AttackApplier:
    return lambda x: apply_patch(x, patch, placement)


def noise_applier(noise: Noise) -> AttackApplier:
    return lambda x: apply_noise(x, noise)


def identity_applier(x: Image) -> Image:
    return x


def channel_distances(model: ModelHandle, layer: str, x: Image, x_adv: Image) -> np.ndarray:
    """Per-channel L2 distance between clean and attacked activations."""
    clean = model.extract_features(x, [layer])[layer].astype(np.float64)
    adv = model.extract_features(x_adv, [layer])[layer].astype(np.float64)
    return np.sqrt(((adv - clean) ** 2).sum(axis=(1, 2)))


def _ranked_channels(distances: np.ndarray) -> list[int]:
    # descending distance, ties broken by ascending channel index
    return sorted(range(len(distances)), key=lambda c: (-distances[c], c))


def top_attacked_channels(
    model: ModelHandle, layer: str, x: Image, x_adv: Image, k: int
) -> list[int]:
    """The k channels with the largest clean-vs-attacked distance."""
    distances = channel_distances(model, layer, x, x_adv)
    if k > len(distances):
        raise ValidationError(f"k={k} exceeds the {len(distances)} channels of {layer!r}")
    return _ranked_channels(distances)[:k]


@dataclass
class FrequencyBins:
    """Per-channel top-k selection frequency with threshold binning."""

    p: np.ndarray
    k: int
    threshold: float
    frequent: int
    occasional: int
    never: int

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.frequent, self.occasional, self.never


def frequency_bins(
    model: ModelHandle,
    layer: str,
    image_set: Sequence[Image],
    attack_applier: AttackApplier,
    k: int = 50,
    threshold: float = 0.5,
) -> FrequencyBins:
    """How often each channel lands in the per-image top-k attacked set."""
    images = list(image_set)
    if not images:
        raise ValidationError("frequency binning needs at least one image")
    counts: np.ndarray | None = None
    for x in images:
        top = top_attacked_channels(model, layer, x, attack_applier(x), k)
        if counts is None:
            c_l = model.feature_shape(layer)[0]
            counts = np.zeros(c_l, dtype=np.int64)
        counts[top] += 1
    p = counts / len(images)
    frequent = int((p >= threshold).sum())
    never = int((p == 0).sum())
    occasional = len(p) - frequent - never
    return FrequencyBins(p, k, threshold, frequent, occasional, never)


@dataclass
class ChannelDistanceProfile:
    """Per-channel mean L2 distance over an image set."""

    values: np.ndarray
    sample_count: int
    layer: str = ""

    def __post_init__(self):
        if (self.values < 0).any() or not np.isfinite(self.values).all():
            raise ValidationError("profile values must be finite and non-negative")

    def top_channels(self, k: int) -> list[int]:
        if k > len(self.values):
            raise ValidationError(f"k={k} exceeds profile length {len(self.values)}")
        return _ranked_channels(self.values)[:k]

    def sorted_view(self, highlight: Iterable[int] = ()) -> list[tuple[int, int, float, bool]]:
        """(channel, rank, value, highlighted) rows in descending order."""
        marked = set(int(c) for c in highlight)
        order = _ranked_channels(self.values)
        return [
            (c, rank, float(self.values[c]), c in marked) for rank, c in enumerate(order)
        ]


def channel_distance_profile(
    model: ModelHandle,
    layer: str,
    image_set: Sequence[Image],
    attack_applier: AttackApplier,
) -> ChannelDistanceProfile:
    images = list(image_set)
    if not images:
        raise ValidationError("profiles need at least one image")
    total: np.ndarray | None = None
    for x in images:
        d = channel_distances(model, layer, x, attack_applier(x))
        total = d if total is None else total + d
    return ChannelDistanceProfile(total / len(images), len(images), layer)


def relative_profile(
    profile_forced: np.ndarray | ChannelDistanceProfile,
    profile_unforced: np.ndarray | ChannelDistanceProfile,
    eps_div: float = 1e-12,
) -> np.ndarray:
    """Elementwise forced/(unforced + eps_div); an all-zero pair maps to 0."""
    forced = np.asarray(
        profile_forced.values if isinstance(profile_forced, ChannelDistanceProfile) else profile_forced,
        dtype=np.float64,
    )
    unforced = np.asarray(
        profile_unforced.values
        if isinstance(profile_unforced, ChannelDistanceProfile)
        else profile_unforced,
        dtype=np.float64,
    )
    if forced.shape != unforced.shape:
        raise ValidationError(
            f"profile length mismatch: {forced.shape} vs {unforced.shape}"
        )
    return forced / (unforced + eps_div)


@dataclass
class ImpactMap:
    """Per-cell mean (over images) of the channel-vector L2 distance."""

    values: np.ndarray
    sample_count: int
    layer: str = ""

    def __post_init__(self):
        if (self.values < 0).any() or not np.isfinite(self.values).all():
            raise ValidationError("impact map values must be finite and non-negative")


def spatial_impact_map(
    model: ModelHandle,
    layer: str,
    image_set: Sequence[Image],
    attack_applier: AttackApplier,
) -> ImpactMap:
    images = list(image_set)
    if not images:
        raise ValidationError("impact maps need at least one image")
    total: np.ndarray | None = None
    for x in images:
        clean = model.extract_features(x, [layer])[layer].astype(np.float64)
        adv = model.extract_features(attack_applier(x), [layer])[layer].astype(np.float64)
        cell = np.sqrt(((adv - clean) ** 2).sum(axis=0))
        total = cell if total is None else total + cell
    return ImpactMap(total / len(images), len(images), layer)


@dataclass
class DriftPoint:
    profile: ChannelDistanceProfile
    overlap: float
    top_channels: tuple[int, ...]


def checkpoint_drift(
    handles: Sequence[ModelHandle],
    layer: str,
    image_set: Sequence[Image],
    patch: Patch,
    placement: Placement,
    baseline_top_set: Sequence[int],
) -> list[DriftPoint]:
    """Distance profiles under a fixed patch across a checkpoint sequence,
    with the Jaccard overlap between each checkpoint's current top set and
    the baseline top set."""
    if not handles:
        raise ValidationError("checkpoint drift needs at least one handle")
    baseline = set(int(c) for c in baseline_top_set)
    if not baseline:
        raise ValidationError("baseline top set is empty")
    applier = patch_applier(patch, placement)
    c_ref = handles[0].feature_shape(layer)[0]
    if max(baseline) >= c_ref:
        raise ValidationError("baseline top set references channels beyond the layer width")
    points: list[DriftPoint] = []
    for i, handle in enumerate(handles):
        c_l = handle.feature_shape(layer)[0]
        if c_l != c_ref:
            raise ValidationError(
                f"checkpoint {i} has {c_l} channels at {layer!r}, expected {c_ref}"
            )
        profile = channel_distance_profile(handle, layer, image_set, applier)
        current = set(profile.top_channels(len(baseline)))
        overlap = len(current & baseline) / len(current | baseline)
        points.append(DriftPoint(profile, overlap, tuple(sorted(current))))
    return points


# ---------------------------------------------------------------------------
# Figure-data emission (CSV for per-channel series, JSON for maps).
# ---------------------------------------------------------------------------


def write_profile_csv(
    path: str | Path, profile: ChannelDistanceProfile, highlight: Iterable[int] = ()
) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "index", "value", "highlight"])
        for channel, rank, value, marked in profile.sorted_view(highlight):
            writer.writerow([channel, rank, repr(value), int(marked)])
    return path


def write_relative_csv(path: str | Path, ratios: np.ndarray, highlight: Iterable[int] = ()) -> Path:
    path = Path(path)
    marked = set(int(c) for c in highlight)
    order = sorted(range(len(ratios)), key=lambda c: (-ratios[c], c))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "index", "value", "highlight"])
        for rank, channel in enumerate(order):
            writer.writerow([channel, rank, repr(float(ratios[channel])), int(channel in marked)])
    return path


def write_bins_csv(path: str | Path, bins: FrequencyBins) -> Path:
    path = Path(path)
    order = sorted(range(len(bins.p)), key=lambda c: (-bins.p[c], c))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "index", "value"])
        for rank, channel in enumerate(order):
            writer.writerow([channel, rank, repr(float(bins.p[channel]))])
    return path


def write_map_json(path: str | Path, impact: ImpactMap) -> Path:
    path = Path(path)
    payload = {
        "layer": impact.layer,
        "h": int(impact.values.shape[0]),
        "w": int(impact.values.shape[1]),
        "sample_count": impact.sample_count,
        "values": [[float(v) for v in row] for row in impact.values],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def write_drift_json(path: str | Path, points: Sequence[DriftPoint]) -> Path:
    path = Path(path)
    payload = [
        {
            "index": i,
            "overlap": point.overlap,
            "top_channels": list(point.top_channels),
            "profile": [float(v) for v in point.profile.values],
        }
        for i, point in enumerate(points)
    ]
    path.write_text(json.dumps(payload, indent=2))
    return path
