"""Desk-scale reference model and synthetic dataset.

The model is a 3-block conv net (7x7 conv, batch norm, smooth relu,
2x2 average pool per block) over 32x32 inputs, with two task heads
sharing the backbone: a linear classifier over globally averaged
features and a 1x1-conv per-pixel segmentation head upsampled to input
resolution. It trains to >=80% held-out accuracy in a couple of minutes
on CPU. The activation is softplus with beta=12, a close smooth
approximation of relu: piecewise-linear activations put optimizer kinks
inside the +-1e-3 window of the finite-difference gradient checks, which
makes those checks unreliable, while the smooth variant keeps them tight.

Activation sites exposed by the adapter: "input" (the [0,1] composited
image, identity, 1x1 receptive field) and "block1".."block3" (each
block's output, post-activation and post-pooling). Block 3 cells have a
receptive field wider than the image, so every cell can respond to a
patch anywhere.

The synthetic task: each image carries one 12x12 textured object on a
noisy gray background, and the class (10-way) is the orientation of the
object's sinusoidal grating. Objects sit in the lower-right region, so
a patch anchored near the top-left corner never overlaps the evidence:
degradation at that placement is contextual, not occlusion. Per-pixel
ground truth marks object pixels with the class index and everything
else as the background class (10). The "shifted" variant keeps the
class geometry but remaps background/object tints and noise statistics,
giving a distribution-shifted proxy source for the same label space.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import Image
from .errors import ValidationError
from .models import (
    CHECKPOINT_FORMAT,
    TorchModelHandle,
    read_checkpoint,
    register_backbone,
)

N_CLASSES = 10
N_SEG_CLASSES = 11
BACKGROUND_CLASS = 10
IMAGE_SIZE = 32
OBJECT_SIZE = 12
# object top-left corner range; keeps objects clear of the top-left quarter
OBJECT_MIN_POS = 15
OBJECT_MAX_POS = 20


class ToyBackbone(nn.Module):
    def __init__(self, widths=(24, 48, 64), kernel=7, beta=12.0):
        super().__init__()
        self.widths = tuple(widths)
        self.kernel = kernel
        self.beta = beta
        chans = [3, *widths]
        blocks = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, kernel_size=kernel, padding=kernel // 2),
                    nn.BatchNorm2d(c_out),
                    nn.Softplus(beta=beta),
                    nn.AvgPool2d(2),
                )
            )
        self.block1, self.block2, self.block3 = blocks

    def forward(self, x):
        return self.block3(self.block2(self.block1(x)))


class ToyMultiNet(nn.Module):
    """Shared backbone with a classifier head and a segmentation head."""

    def __init__(
        self,
        widths=(24, 48, 64),
        kernel=7,
        beta=12.0,
        n_classes=N_CLASSES,
        n_seg_classes=N_SEG_CLASSES,
    ):
        super().__init__()
        self.backbone = ToyBackbone(widths, kernel, beta)
        self.n_classes = n_classes
        self.n_seg_classes = n_seg_classes
        self.cls_head = nn.Linear(widths[-1], n_classes)
        self.seg_head = nn.Conv2d(widths[-1], n_seg_classes, kernel_size=1)

    def features(self, x):
        return self.backbone(x)

    def classify(self, x):
        return self.cls_head(self.features(x).mean(dim=(2, 3)))

    def segment(self, x):
        logits = self.seg_head(self.features(x))
        return nn.functional.interpolate(logits, size=x.shape[-2:], mode="nearest")

    def forward(self, x):
        return self.classify(x)

    @property
    def arch(self) -> dict:
        return {
            "widths": list(self.backbone.widths),
            "kernel": self.backbone.kernel,
            "beta": self.backbone.beta,
            "n_classes": self.n_classes,
            "n_seg_classes": self.n_seg_classes,
        }


def fresh_toy_net(seed: int = 0, **arch) -> ToyMultiNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ToyMultiNet(**arch)
    net.eval()
    return net


class ToyHandle(TorchModelHandle):
    def _encoder_forward(self, x_norm):
        return self.module.features(x_norm)

    def _task_out(self, x_norm):
        if self.task_kind == "classification":
            return self.module.classify(x_norm)
        if self.task_kind == "segmentation":
            return self.module.segment(x_norm)
        raise ValidationError(f"toy adapter has no head for task {self.task_kind!r}")


def toy_handle(net: ToyMultiNet, task: str = "classification") -> ToyHandle:
    return ToyHandle(
        net,
        backbone_id="toy",
        task_kind=task,
        sites={
            "block1": net.backbone.block1,
            "block2": net.backbone.block2,
            "block3": net.backbone.block3,
        },
        layer_order=["input", "block1", "block2", "block3"],
        preprocessing="none: the toy net consumes [0,1] pixels directly",
        trainable=True,
        probe_hw=(IMAGE_SIZE, IMAGE_SIZE),
    )


@register_backbone("toy")
def build_toy(task="classification", checkpoint=None, seed=0, **arch) -> ToyHandle:
    if checkpoint is not None:
        payload = read_checkpoint(checkpoint)
        net = ToyMultiNet(**payload["arch"])
        net.load_state_dict(payload["state_dict"])
        net.eval()
    else:
        net = fresh_toy_net(seed=seed, **arch)
    return toy_handle(net, task)


def save_toy_checkpoint(net: ToyMultiNet, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "backbone": "toy",
            "arch": net.arch,
            "state_dict": net.state_dict(),
            "meta": meta or {},
        },
        path,
    )
    return path


# ---------------------------------------------------------------------------
# Synthetic object dataset.
# ---------------------------------------------------------------------------


@dataclass
class ToyDataset:
    images: list[Image]
    labels: np.ndarray
    seg_maps: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)


def _grating(size: int, theta: float, freq: float, phase: float) -> np.ndarray:
    u, v = np.meshgrid(
        np.arange(size, dtype=np.float64) / size,
        np.arange(size, dtype=np.float64) / size,
        indexing="ij",
    )
    return np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)


def make_toy_dataset(
    n: int,
    seed: int,
    *,
    shifted: bool = False,
    tag: str | None = None,
) -> ToyDataset:
    """n object images with classification labels and per-pixel class maps."""
    rng = np.random.default_rng(seed)
    if shifted:
        bg_color = np.array([0.44, 0.52, 0.56])
        tile_color = np.array([0.56, 0.48, 0.44])
        amp, noise_sigma, bg_freq, bg_amp = 0.15, 0.13, 2.8, 0.05
    else:
        bg_color = np.array([0.5, 0.5, 0.5])
        tile_color = np.array([0.5, 0.5, 0.5])
        amp, noise_sigma, bg_freq, bg_amp = 0.20, 0.10, 2.0, 0.06
    prefix = tag if tag is not None else ("toyshift" if shifted else "toy")
    size, obj = IMAGE_SIZE, OBJECT_SIZE
    labels = rng.integers(0, N_CLASSES, size=n)
    images: list[Image] = []
    seg_maps: list[np.ndarray] = []
    for i, label in enumerate(labels):
        bg = (
            bg_color[None, None, :]
            + bg_amp * _grating(size, np.pi / 7, bg_freq, rng.uniform(0, 2 * np.pi))[:, :, None]
            + rng.normal(0.0, noise_sigma, size=(size, size, 3))
        )
        theta = np.pi * label / N_CLASSES
        tile = tile_color[None, None, :] + amp * _grating(
            obj, theta, 5.5, rng.uniform(0, 2 * np.pi)
        )[:, :, None]
        r = int(rng.integers(OBJECT_MIN_POS, OBJECT_MAX_POS + 1))
        c = int(rng.integers(OBJECT_MIN_POS, OBJECT_MAX_POS + 1))
        bg[r : r + obj, c : c + obj] = tile
        seg = np.full((size, size), BACKGROUND_CLASS, dtype=np.int64)
        seg[r : r + obj, c : c + obj] = label
        images.append(
            Image(np.clip(bg, 0.0, 1.0).astype(np.float32), id=f"{prefix}-{seed}-{i:05d}")
        )
        seg_maps.append(seg)
    return ToyDataset(images, labels.astype(np.int64), seg_maps)


# ---------------------------------------------------------------------------
# Training utilities (the only code that mutates model parameters).
# ---------------------------------------------------------------------------


def _to_batch_tensor(images: list[Image]) -> torch.Tensor:
    arr = np.stack([img.data for img in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


def train_toy_net(
    dataset: ToyDataset,
    *,
    seed: int = 0,
    epochs: int = 8,
    batch_size: int = 128,
    lr: float = 2e-3,
    seg_weight: float = 0.5,
    net: ToyMultiNet | None = None,
) -> ToyMultiNet:
    """Train both heads jointly; returns the net in eval mode."""
    if net is None:
        net = fresh_toy_net(seed=seed)
    x_all = _to_batch_tensor(dataset.images)
    y_all = torch.from_numpy(np.asarray(dataset.labels, dtype=np.int64))
    s_all = torch.from_numpy(np.stack(dataset.seg_maps))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(dataset), batch_size):
            idx = order[start : start + batch_size]
            feats = net.features(x_all[idx])
            logits = net.cls_head(feats.mean(dim=(2, 3)))
            loss = nn.functional.cross_entropy(logits, y_all[idx])
            if seg_weight > 0:
                seg_logits = nn.functional.interpolate(
                    net.seg_head(feats), size=x_all.shape[-2:], mode="nearest"
                )
                loss = loss + seg_weight * nn.functional.cross_entropy(seg_logits, s_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


def quick_accuracy(
    net: ToyMultiNet, images: list[Image], labels: np.ndarray, batch_size: int = 256
) -> float:
    """Plain top-1 accuracy in percent; training-time convenience."""
    net.eval()
    x_all = _to_batch_tensor(images)
    y_all = np.asarray(labels, dtype=np.int64)
    hits = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = net.classify(x_all[start : start + batch_size])
            hits += int((logits.argmax(dim=1).numpy() == y_all[start : start + batch_size]).sum())
    return 100.0 * hits / len(images)


def finetune_with_snapshots(
    net: ToyMultiNet,
    dataset: ToyDataset,
    *,
    steps: int,
    snapshot_every: int,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = 2e-3,
    permute_labels: bool = False,
) -> list[ToyMultiNet]:
    """Finetune a copy of the net on the classifier objective, capturing
    eval-mode snapshots every snapshot_every optimizer steps. The input
    net is left untouched. permute_labels remaps the label space (a fixed
    seeded permutation), which forces feature reorganization."""
    work = copy.deepcopy(net)
    x_all = _to_batch_tensor(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if permute_labels:
        perm = np.random.default_rng(seed).permutation(net.n_classes)
        labels = perm[labels]
    y_all = torch.from_numpy(labels)
    opt = torch.optim.Adam(work.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    snapshots: list[ToyMultiNet] = []
    work.train()
    step = 0
    while step < steps:
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(dataset), batch_size):
            idx = order[start : start + batch_size]
            loss = nn.functional.cross_entropy(work.classify(x_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % snapshot_every == 0:
                snap = copy.deepcopy(work)
                snap.eval()
                snapshots.append(snap)
            if step >= steps:
                break
    work.eval()
    return snapshots
