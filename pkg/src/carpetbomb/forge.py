"""Perturbation optimizers.

All crafting here is universal: a single perturbation is optimized by
cycling a seeded shuffle of the training stream. One optimization step
consists of iterations_per_step single-minibatch gradient-ascent updates,
visiting each drawn minibatch for updates_per_image consecutive updates
before moving on. The patch (or noise) is clipped back into its feasible
set after every update, and every intermediate iterate is checked to lie
there.

The crafting loop is a single sequential optimizer; data loading may be
concurrent but updates are serialized.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .core import (
    FeatureMask,
    Image,
    Noise,
    NoiseBudget,
    Patch,
    Placement,
    derive_feature_mask,
    make_pixel_mask,
)
from .errors import CraftRuntimeError, ValidationError
from .losses import (
    CombinedLossConfig,
    FeatureTargetSpec,
    _resolve_channels,
    feature_loss_tensor,
    prepare_masks,
)
from .models import ModelHandle, image_to_tensor

CACHE_ENV_VAR = "CARPET_CACHE_DIR"


@dataclass(frozen=True)
class CraftConfig:
    """Patch optimization schedule and optimizer settings."""

    steps: int = 100
    iterations_per_step: int = 1000
    updates_per_image: int = 10
    minibatch: int = 1
    momentum: float = 0.9
    learning_rate: float = 0.01
    optimizer_kind: str = "sgd_momentum"
    adam_lr: float = 0.5
    init: str = "zeros"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.iterations_per_step < 1 or self.iterations_per_step % self.updates_per_image:
            raise ValidationError(
                f"iterations_per_step ({self.iterations_per_step}) must be a positive "
                f"multiple of updates_per_image ({self.updates_per_image})"
            )
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.minibatch < 1:
            raise ValidationError("minibatch must be >= 1")
        if self.optimizer_kind not in ("sgd_momentum", "adam"):
            raise ValidationError(f"unknown optimizer kind {self.optimizer_kind!r}")
        if self.init not in ("zeros", "uniform_random"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.learning_rate < 0 or self.adam_lr < 0:
            raise ValidationError("learning rates must be non-negative")

    @property
    def visits_per_step(self) -> int:
        return self.iterations_per_step // self.updates_per_image


@dataclass(frozen=True)
class NoiseCraftConfig:
    """Momentum iterative sign-attack (TMIFGSM) settings."""

    epsilon: float = 8 / 255
    step_size: float | None = None
    steps: int = 100
    momentum_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 10)
        if not (0 < self.step_size <= self.epsilon):
            raise ValidationError(
                f"step_size must satisfy 0 < step_size <= epsilon, got {self.step_size}"
            )
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")


@dataclass
class LossTrace:
    """Per-step mean objective values recorded while crafting."""

    steps: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)

    def record(self, step: int, value: float) -> None:
        self.steps.append(step)
        self.mean_loss.append(value)

    def to_json(self) -> str:
        rows = [
            {"step": s, "mean_loss": v} for s, v in zip(self.steps, self.mean_loss)
        ]
        return json.dumps(rows, indent=2)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


class CleanFeatureCache:
    """Clean reference activations keyed by stream position in memory and,
    when a cache directory is configured, by (image id, layers, model digest)
    on disk. Only images with non-empty ids are persisted."""

    def __init__(self, model: ModelHandle, layers: Sequence[str], cache_dir: str | None = None):
        self.model = model
        self.layers = list(layers)
        self._mem: dict[int, dict[str, torch.Tensor]] = {}
        directory = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV_VAR)
        self._dir = Path(directory) if directory else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)

    def _disk_key(self, image: Image) -> Path | None:
        if self._dir is None or not image.id:
            return None
        raw = "\x00".join([self.model.digest(), image.id, *self.layers])
        return self._dir / (hashlib.sha256(raw.encode()).hexdigest() + ".npz")

    def get(self, idx: int, image: Image) -> dict[str, torch.Tensor]:
        if idx in self._mem:
            return self._mem[idx]
        path = self._disk_key(image)
        if path is not None and path.exists():
            with np.load(path) as payload:
                feats = {
                    layer: torch.from_numpy(payload[layer]).to(self.model.dtype)[None]
                    for layer in self.layers
                }
        else:
            arrs = self.model.extract_features(image, self.layers)
            feats = {
                layer: torch.from_numpy(arrs[layer]).to(self.model.dtype)[None]
                for layer in self.layers
            }
            if path is not None:
                np.savez(path, **{layer: arrs[layer] for layer in self.layers})
        self._mem[idx] = feats
        return feats


def _materialize_stream(train_stream: Iterable[Image]) -> list[Image]:
    images = list(train_stream)
    if not images:
        raise ValidationError("training stream is empty")
    shape = images[0].shape
    for i, img in enumerate(images):
        if img.shape != shape:
            raise ValidationError(
                f"stream image {i} has shape {img.shape}, expected {shape}; "
                "universal crafting needs a single image size"
            )
    return images


def feature_masks_for(
    model: ModelHandle,
    spec: FeatureTargetSpec,
    image_shape: tuple[int, int],
    placement: Placement | None,
) -> dict[str, FeatureMask]:
    """Conservative per-layer masks for a placement (all-ones when None)."""
    masks: dict[str, FeatureMask] = {}
    for layer in spec.layers:
        _, h_l, w_l = model.feature_shape(layer)
        if placement is None:
            masks[layer] = FeatureMask(np.ones((h_l, w_l), dtype=np.uint8), layer=layer)
        else:
            pixel_mask = make_pixel_mask(image_shape, placement)
            masks[layer] = derive_feature_mask(pixel_mask, (h_l, w_l), layer=layer)
    return masks


def _validate_channels(model: ModelHandle, spec: FeatureTargetSpec) -> None:
    for layer in spec.layers:
        c_l, _, _ = model.feature_shape(layer)
        _resolve_channels(spec, layer, c_l)


def _check_finite(loss: torch.Tensor, step: int, image: Image) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise CraftRuntimeError(
            f"non-finite objective ({value}) at step {step} on image {image.id!r}; aborting"
        )
    return value


def _init_patch(cfg: CraftConfig, shape: tuple[int, int, int]) -> torch.Tensor:
    if cfg.init == "zeros":
        return torch.zeros(shape)
    gen = torch.Generator().manual_seed(cfg.seed)
    return torch.rand(shape, generator=gen)


def _craft_patch_loop(
    model: ModelHandle,
    images: list[Image],
    placement: Placement,
    cfg: CraftConfig,
    objective: Callable[[torch.Tensor, list[int]], torch.Tensor],
    created_by: str,
) -> tuple[Patch, LossTrace]:
    h_img, w_img = images[0].shape
    r0, c0 = placement.resolve((h_img, w_img))
    ph, pw = placement.patch_h, placement.patch_w

    param = torch.nn.Parameter(_init_patch(cfg, (3, ph, pw)))
    velocity = torch.zeros_like(param)
    adam = (
        torch.optim.Adam([param], lr=cfg.adam_lr)
        if cfg.optimizer_kind == "adam"
        else None
    )

    order = np.random.default_rng(cfg.seed).permutation(len(images))
    cursor = 0
    trace = LossTrace()

    for step in range(cfg.steps):
        step_losses: list[float] = []
        for _ in range(cfg.visits_per_step):
            idx = [int(order[(cursor + i) % len(images)]) for i in range(cfg.minibatch)]
            cursor += cfg.minibatch
            batch = [images[i] for i in idx]
            x_t = image_to_tensor(np.stack([img.data for img in batch]), model.dtype)
            for _ in range(cfg.updates_per_image):
                param.grad = None
                x_adv = x_t.clone()
                x_adv[:, :, r0 : r0 + ph, c0 : c0 + pw] = param
                loss = objective(x_adv, idx)
                step_losses.append(_check_finite(loss, step, batch[0]))
                if adam is None:
                    (grad,) = torch.autograd.grad(loss, param)
                    with torch.no_grad():
                        velocity.mul_(cfg.momentum).add_(grad)
                        param.add_(cfg.learning_rate * velocity)
                        param.clamp_(0.0, 1.0)
                else:
                    (-loss).backward()
                    adam.step()
                    with torch.no_grad():
                        param.clamp_(0.0, 1.0)
                if param.data.min() < 0 or param.data.max() > 1:
                    raise CraftRuntimeError("patch iterate escaped [0,1]")
        trace.record(step, float(np.mean(step_losses)))

    data = param.detach().numpy().transpose(1, 2, 0).astype(np.float32)
    return Patch(data, created_by=created_by), trace


def craft_carpet_patch(
    model: ModelHandle,
    train_stream: Iterable[Image],
    placement: Placement,
    spec: FeatureTargetSpec,
    cfg: CraftConfig,
    *,
    created_by: str = "",
    cache_dir: str | None = None,
) -> tuple[Patch, LossTrace]:
    """Universal task-agnostic patch maximizing off-patch feature disruption."""
    images = _materialize_stream(train_stream)
    _validate_channels(model, spec)
    masks = feature_masks_for(model, spec, images[0].shape, placement)
    mask_tensors = prepare_masks(masks, model, spec)
    cache = CleanFeatureCache(model, spec.layers, cache_dir)

    def objective(x_adv: torch.Tensor, idx: list[int]) -> torch.Tensor:
        clean = {
            layer: torch.cat([cache.get(i, images[i])[layer] for i in idx])
            for layer in spec.layers
        }
        return feature_loss_tensor(model, x_adv, clean, spec, mask_tensors)

    return _craft_patch_loop(model, images, placement, cfg, objective, created_by)


def craft_task_patch(
    model: ModelHandle,
    train_stream: Iterable[Image],
    labels: Sequence,
    placement: Placement,
    cfg: CraftConfig,
    *,
    created_by: str = "",
) -> tuple[Patch, LossTrace]:
    """Generic task-loss patch: same loop, ascending the task objective."""
    if model.task_kind == "none":
        raise ValidationError("task patch crafting requires a task head")
    images = _materialize_stream(train_stream)
    labels = list(labels)
    if len(labels) != len(images):
        raise ValidationError(
            f"{len(labels)} labels for {len(images)} stream images; they must align"
        )

    def objective(x_adv: torch.Tensor, idx: list[int]) -> torch.Tensor:
        y = labels[idx[0]] if len(idx) == 1 else np.asarray([labels[i] for i in idx])
        return model.task_loss_tensor(x_adv, y)

    return _craft_patch_loop(model, images, placement, cfg, objective, created_by)


def craft_feature_noise_tmifgsm(
    model: ModelHandle,
    train_stream: Iterable[Image],
    spec: FeatureTargetSpec,
    ncfg: NoiseCraftConfig,
    *,
    labels: Sequence | None = None,
    combined: CombinedLossConfig | None = None,
    created_by: str = "",
    cache_dir: str | None = None,
) -> tuple[Noise, LossTrace]:
    """Universal bounded noise via the momentum iterative sign attack.

    Per update: g <- decay*g + grad/||grad||_1, then delta is stepped along
    sign(g) and projected back into the max-norm ball. With a combined
    config and labels, the ascent objective gains the task term
    (task + eta * feature); by default it is the feature loss alone.

    The all-zeros start is a stationary point of the pure feature
    objective (the perturbed image equals the clean one), so an
    exactly-zero gradient is replaced by a seeded random subgradient
    direction; subsequent updates see ordinary gradients.
    """
    images = _materialize_stream(train_stream)
    _validate_channels(model, spec)
    if combined is not None and combined.task_loss_kind != "none" and labels is None:
        raise ValidationError("combined objective with a task term needs labels")
    if labels is not None and len(list(labels)) != len(images):
        raise ValidationError("labels must align with the stream")
    h_img, w_img = images[0].shape
    masks = feature_masks_for(model, spec, (h_img, w_img), None)
    mask_tensors = prepare_masks(masks, model, spec)
    cache = CleanFeatureCache(model, spec.layers, cache_dir)

    eps = float(ncfg.epsilon)
    delta = torch.zeros(3, h_img, w_img)
    g = torch.zeros_like(delta)
    order = np.random.default_rng(ncfg.seed).permutation(len(images))
    kick_gen = torch.Generator().manual_seed(ncfg.seed + 1)
    trace = LossTrace()

    for step in range(ncfg.steps):
        i = int(order[step % len(images)])
        image = images[i]
        x_t = image_to_tensor(image.data, model.dtype)
        delta_param = delta.clone().requires_grad_(True)
        x_adv = torch.clamp(x_t + delta_param, 0.0, 1.0)
        clean = {layer: cache.get(i, image)[layer] for layer in spec.layers}
        loss = feature_loss_tensor(model, x_adv, clean, spec, mask_tensors)
        if combined is not None:
            feature_term = loss
            task_term = 0.0
            if combined.task_loss_kind != "none":
                task_term = model.task_loss_tensor(x_adv, labels[i])
            loss = task_term + combined.eta * feature_term
        trace.record(step, _check_finite(loss, step, image))
        (grad,) = torch.autograd.grad(loss, delta_param)
        l1 = grad.abs().sum()
        if float(l1) > 0:
            g = ncfg.momentum_decay * g + grad / l1
        else:
            kick = (
                torch.randint(0, 2, delta.shape, generator=kick_gen, dtype=torch.int64) * 2 - 1
            ).to(delta.dtype)
            g = ncfg.momentum_decay * g + kick / kick.abs().sum()
        with torch.no_grad():
            delta = torch.clamp(delta + ncfg.step_size * torch.sign(g), -eps, eps)
        if delta.abs().max() > eps:
            raise CraftRuntimeError("noise iterate escaped the max-norm ball")

    data = delta.numpy().transpose(1, 2, 0).astype(np.float32)
    return Noise(data, NoiseBudget(eps)), trace


def craft_forced(
    model: ModelHandle,
    train_stream: Iterable[Image],
    placement_or_budget: Placement | NoiseBudget,
    spec_with_explicit_channels: FeatureTargetSpec,
    cfg: CraftConfig | NoiseCraftConfig,
    *,
    created_by: str = "",
    cache_dir: str | None = None,
) -> tuple[Patch | Noise, LossTrace]:
    """Channel-forced (mimetic) crafting: the carpet/noise loops restricted
    to an explicit channel set per layer."""
    spec = spec_with_explicit_channels
    if spec.channels is None or any(spec.channels_for(layer) is None for layer in spec.layers):
        raise ValidationError("forced crafting requires an explicit channel set per layer")
    if isinstance(placement_or_budget, Placement):
        if not isinstance(cfg, CraftConfig):
            raise ValidationError("patch crafting takes a CraftConfig")
        return craft_carpet_patch(
            model,
            train_stream,
            placement_or_budget,
            spec,
            cfg,
            created_by=created_by,
            cache_dir=cache_dir,
        )
    if isinstance(placement_or_budget, NoiseBudget):
        if not isinstance(cfg, NoiseCraftConfig):
            raise ValidationError("noise crafting takes a NoiseCraftConfig")
        if abs(placement_or_budget.epsilon - cfg.epsilon) > 1e-12:
            raise ValidationError("budget epsilon and NoiseCraftConfig.epsilon disagree")
        return craft_feature_noise_tmifgsm(
            model,
            train_stream,
            spec,
            cfg,
            created_by=created_by,
            cache_dir=cache_dir,
        )
    raise ValidationError("placement_or_budget must be a Placement or a NoiseBudget")
