"""Disruption objectives: masked feature loss, task losses, and the
weighted combination of the two.

The feature loss is, per targeted layer, the per-channel Euclidean norm
of the masked difference between attacked and clean activations, summed
over the selected channel set and weighted per layer. The norm is
unsquared by default; a squared variant is available via
FeatureTargetSpec.squared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import FeatureMask, Image
from .errors import ValidationError
from .models import ModelHandle, image_to_tensor

#: added under the square root on the differentiable path so that channels
#: with an exactly-zero masked difference contribute a zero (not NaN) gradient
GRAD_SAFE_EPS = 1e-24


@dataclass(frozen=True)
class FeatureTargetSpec:
    """Which layers and channel subsets the feature loss attacks."""

    layers: tuple[str, ...]
    channels: Mapping[str, Sequence[int] | None] | None = None
    per_layer_weight: Mapping[str, float] | None = None
    squared: bool = False

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("feature target needs at least one layer")
        object.__setattr__(self, "layers", layers)
        if self.channels:
            for layer, chans in self.channels.items():
                if chans is None:
                    continue
                if len(chans) == 0:
                    raise ValidationError(f"empty channel set for layer {layer!r}")
                if any(int(c) < 0 for c in chans):
                    raise ValidationError(f"negative channel index for layer {layer!r}")
        if self.per_layer_weight:
            for layer, w in self.per_layer_weight.items():
                if w < 0:
                    raise ValidationError(f"negative weight for layer {layer!r}")

    def channels_for(self, layer: str) -> tuple[int, ...] | None:
        """Explicit channel indices, or None meaning all channels."""
        if not self.channels:
            return None
        chans = self.channels.get(layer)
        return None if chans is None else tuple(int(c) for c in chans)

    def weight_for(self, layer: str) -> float:
        if not self.per_layer_weight:
            return 1.0
        return float(self.per_layer_weight.get(layer, 1.0))


@dataclass(frozen=True)
class CombinedLossConfig:
    eta: float = 1.0
    task_loss_kind: str = "none"

    def __post_init__(self):
        if self.eta < 0:
            raise ValidationError(f"feature-loss weight eta must be >= 0, got {self.eta}")
        if self.task_loss_kind not in ("cross_entropy", "detector_objective", "none"):
            raise ValidationError(f"unknown task loss kind {self.task_loss_kind!r}")


def _resolve_channels(spec: FeatureTargetSpec, layer: str, c_l: int) -> Sequence[int]:
    chans = spec.channels_for(layer)
    if chans is None:
        return range(c_l)
    bad = [c for c in chans if c >= c_l]
    if bad:
        raise ValidationError(
            f"channel indices {bad} out of range for layer {layer!r} with {c_l} channels"
        )
    return chans


def _check_mask(mask: FeatureMask, layer: str, spatial: tuple[int, int]) -> None:
    if mask.shape != spatial:
        raise ValidationError(
            f"feature mask shape {mask.shape} does not match layer {layer!r} "
            f"spatial shape {spatial}"
        )


def feature_loss(
    model: ModelHandle,
    x: Image,
    x_adv: Image,
    spec: FeatureTargetSpec,
    masks: Mapping[str, FeatureMask],
) -> float:
    """Masked feature-disruption value between a clean and an attacked image.

    Clean activations are computed without gradient tracking; accumulation
    runs in float64.
    """
    if x.data.shape != x_adv.data.shape:
        raise ValidationError("clean and attacked images must share a shape")
    missing = [layer for layer in spec.layers if layer not in masks]
    if missing:
        raise ValidationError(f"missing feature masks for layer(s) {missing}")
    clean = model.extract_features(x, spec.layers)
    adv = model.extract_features(x_adv, spec.layers)
    total = 0.0
    for layer in spec.layers:
        c_l = clean[layer].shape[0]
        _check_mask(masks[layer], layer, clean[layer].shape[1:])
        m = masks[layer].data.astype(np.float64)
        diff = (adv[layer].astype(np.float64) - clean[layer].astype(np.float64)) * m
        ssq = (diff**2).sum(axis=(1, 2))
        per_channel = ssq if spec.squared else np.sqrt(ssq)
        chans = _resolve_channels(spec, layer, c_l)
        total += spec.weight_for(layer) * float(per_channel[list(chans)].sum())
    return total


def feature_loss_tensor(
    model: ModelHandle,
    x_adv_t: torch.Tensor,
    clean_feats: Mapping[str, torch.Tensor],
    spec: FeatureTargetSpec,
    mask_tensors: Mapping[str, torch.Tensor],
    grad_safe_eps: float = GRAD_SAFE_EPS,
) -> torch.Tensor:
    """Differentiable feature loss for an attacked input batch.

    clean_feats holds detached (B, C, h, w) activations of the clean images;
    mask_tensors holds (h, w) float tensors. The per-image loss is averaged
    over the batch, so a batch of one reproduces the single-image value.
    """
    captured = model.features_tensor(x_adv_t, spec.layers)
    total = x_adv_t.new_zeros(())
    for layer in spec.layers:
        adv = captured[layer]
        diff = (adv - clean_feats[layer]) * mask_tensors[layer]
        ssq = diff.pow(2).sum(dim=(2, 3))
        per_channel = ssq if spec.squared else torch.sqrt(ssq + grad_safe_eps)
        chans = _resolve_channels(spec, layer, adv.shape[1])
        if len(chans) == adv.shape[1]:
            selected = per_channel.sum(dim=1)
        else:
            selected = per_channel[:, list(chans)].sum(dim=1)
        total = total + spec.weight_for(layer) * selected.mean()
    return total


def prepare_masks(
    masks: Mapping[str, FeatureMask], model: ModelHandle, spec: FeatureTargetSpec
) -> dict[str, torch.Tensor]:
    """Validate mask alignment against the model and convert to tensors."""
    out: dict[str, torch.Tensor] = {}
    for layer in spec.layers:
        if layer not in masks:
            raise ValidationError(f"missing feature mask for layer {layer!r}")
        _, h_l, w_l = model.feature_shape(layer)
        _check_mask(masks[layer], layer, (h_l, w_l))
        out[layer] = torch.from_numpy(masks[layer].data.astype(np.float32)).to(model.dtype)
    return out


def make_feature_loss_fn(x_clean: Image, spec: FeatureTargetSpec, masks: Mapping[str, FeatureMask]):
    """Build a (handle, input tensor) -> scalar loss closure for input_gradient."""

    def fn(handle: ModelHandle, x_t: torch.Tensor) -> torch.Tensor:
        mask_tensors = prepare_masks(masks, handle, spec)
        with torch.no_grad():
            clean = handle.features_tensor(
                image_to_tensor(x_clean.data, handle.dtype), spec.layers
            )
        clean = {k: v.detach() for k, v in clean.items()}
        return feature_loss_tensor(handle, x_t, clean, spec, mask_tensors)

    return fn


def _check_label_kind(model: ModelHandle, y) -> None:
    if model.task_kind == "classification":
        if not np.isscalar(y) and not isinstance(y, (int, np.integer)):
            raise ValidationError("classification task loss expects an integer label")
    elif model.task_kind == "segmentation":
        arr = np.asarray(y)
        if arr.ndim != 2:
            raise ValidationError("segmentation task loss expects an (H, W) class map")
    elif model.task_kind == "none":
        raise ValidationError("model carries no task head; task loss undefined")


def task_loss(model: ModelHandle, x_adv: Image, y) -> float:
    """Cross-entropy for classification, mean per-pixel cross-entropy for
    segmentation, and the adapter's per-cell objectness+class objective for
    detection heads."""
    _check_label_kind(model, y)
    x_t = image_to_tensor(x_adv.data, model.dtype)
    with torch.no_grad():
        value = model.task_loss_tensor(x_t, y)
    return float(value)


def combined_loss(
    model: ModelHandle,
    x: Image,
    y,
    x_adv: Image,
    spec: FeatureTargetSpec,
    masks: Mapping[str, FeatureMask],
    cfg: CombinedLossConfig,
) -> float:
    """task_loss + eta * feature_loss, with the task term dropped for kind 'none'."""
    task_term = 0.0
    if cfg.task_loss_kind != "none":
        if cfg.task_loss_kind == "detector_objective" and model.task_kind != "detection":
            raise ValidationError("detector_objective requires a detection head")
        if cfg.task_loss_kind == "cross_entropy" and model.task_kind not in (
            "classification",
            "segmentation",
        ):
            raise ValidationError("cross_entropy requires a classification or segmentation head")
        task_term = task_loss(model, x_adv, y)
    feature_term = feature_loss(model, x, x_adv, spec, masks)
    return task_term + cfg.eta * feature_term
