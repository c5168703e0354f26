"""Optional full-scale backbone adapters.

resnet50 / resnet18 wrap torchvision models. Weights are never
downloaded here: pass a local checkpoint (either this toolkit's
checkpoint format or a raw torchvision state dict) or run with random
initialization for smoke tests. Activation sites are the outputs of the
residual stages ("layer1".."layer4", post-activation), which is the
conventional probe point for feature attacks on these networks; the
paper-scale experiments target "layer4". Inputs are [0,1] RGB, and the
adapter applies the standard ImageNet channel normalization after
compositing.

darknet19 / yolov2 / bisenet adapters are not bundled: register one via
carpetbomb.models.register_backbone around your local implementation and
the rest of the toolkit (losses, forge, forensics, harness) works
unchanged. Their absence does not affect the desk-scale suite.
"""

from __future__ import annotations

import torch

from .errors import ValidationError
from .models import TorchModelHandle, register_backbone

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _imagenet_normalize(x_t: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(_IMAGENET_MEAN, dtype=x_t.dtype).view(1, 3, 1, 1)
    std = torch.tensor(_IMAGENET_STD, dtype=x_t.dtype).view(1, 3, 1, 1)
    return (x_t - mean) / std


def _load_state(net: torch.nn.Module, checkpoint: str) -> None:
    payload = torch.load(checkpoint, map_location="cpu", weights_only=True)
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    net.load_state_dict(payload)


def _build_resnet(name: str, task: str, checkpoint: str | None):
    if task not in ("classification", "none"):
        raise ValidationError(f"{name} adapter provides a classification head, not {task!r}")
    try:
        import torchvision
    except ImportError as exc:
        raise ValidationError(
            f"{name} adapter needs torchvision (pip install carpetbomb[zoo])"
        ) from exc
    ctor = getattr(torchvision.models, name)
    net = ctor(weights=None)
    if checkpoint is not None:
        _load_state(net, checkpoint)
    net.eval()
    return TorchModelHandle(
        net,
        backbone_id=name,
        task_kind=task,
        sites={
            "layer1": net.layer1,
            "layer2": net.layer2,
            "layer3": net.layer3,
            "layer4": net.layer4,
        },
        layer_order=["input", "layer1", "layer2", "layer3", "layer4"],
        normalize=_imagenet_normalize,
        preprocessing=(
            "ImageNet channel normalization (mean 0.485/0.456/0.406, "
            "std 0.229/0.224/0.225) applied after compositing"
        ),
        trainable=False,
        probe_hw=(224, 224),
    )


@register_backbone("resnet50")
def build_resnet50(task="classification", checkpoint=None, **_ignored):
    return _build_resnet("resnet50", task, checkpoint)


@register_backbone("resnet18")
def build_resnet18(task="classification", checkpoint=None, **_ignored):
    return _build_resnet("resnet18", task, checkpoint)
