"""Uniform interface over encoders and task models.

A handle exposes named activation sites on a torch module, task forward
passes, and gradients of scalar losses with respect to the input image.
Compositing happens in [0,1] pixel space strictly before the adapter's
normalization; the special layer name "input" is the composited [0,1]
image itself (an identity site with a 1x1 receptive field).

Handles are read-only: no operation here mutates model parameters. The
toy training utilities (see toy.py) operate on raw modules before a
handle is constructed.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import Image
from .errors import CraftRuntimeError, ValidationError

LayerId = str

CHECKPOINT_FORMAT = "carpetbomb/v1"

INPUT_LAYER = "input"


def image_to_tensor(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H,W,3) or (B,H,W,3) float array in [0,1] -> (B,3,H,W) tensor."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return t.to(dtype)


def tensor_to_image_array(t: torch.Tensor) -> np.ndarray:
    """(3,H,W) or (1,3,H,W) tensor -> (H,W,3) float array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)


class TorchModelHandle:
    """Adapter over an eval-mode torch module with named activation sites."""

    def __init__(
        self,
        module: nn.Module,
        *,
        backbone_id: str,
        task_kind: str = "none",
        sites: Mapping[str, nn.Module] | None = None,
        layer_order: Sequence[str] | None = None,
        normalize: Callable[[torch.Tensor], torch.Tensor] | None = None,
        preprocessing: str = "identity (inputs already in [0,1])",
        trainable: bool = False,
        probe_hw: tuple[int, int] = (32, 32),
    ):
        if task_kind not in ("classification", "detection", "segmentation", "none"):
            raise ValidationError(f"unknown task kind {task_kind!r}")
        module.eval()
        self.module = module
        self.backbone_id = backbone_id
        self.task_kind = task_kind
        self.preprocessing = preprocessing
        self.trainable = trainable
        self._sites = dict(sites or {})
        self._normalize = normalize
        self._probe_hw = probe_hw
        order = list(layer_order) if layer_order is not None else list(self._sites)
        if INPUT_LAYER not in order:
            order = [INPUT_LAYER] + order
        self.layers: list[str] = order
        self._feature_shapes: dict[str, tuple[int, int, int]] = {}
        self._digest: str | None = None

    # -- plumbing ---------------------------------------------------------

    def normalize(self, x_t: torch.Tensor) -> torch.Tensor:
        return self._normalize(x_t) if self._normalize is not None else x_t

    def _check_layers(self, layers: Sequence[str]) -> None:
        unknown = [name for name in layers if name not in self.layers]
        if unknown:
            raise ValidationError(
                f"unknown layer(s) {unknown} for backbone {self.backbone_id!r}; "
                f"available: {self.layers}"
            )

    def _task_out(self, x_norm: torch.Tensor) -> torch.Tensor:
        return self.module(x_norm)

    def _forward(
        self, x_t: torch.Tensor, layers: Sequence[str], *, run_task: bool = False
    ) -> tuple[torch.Tensor | None, dict[str, torch.Tensor]]:
        """Single forward pass capturing the requested sites.

        x_t is the composited [0,1] image batch; normalization happens here.
        """
        captured: dict[str, torch.Tensor] = {}
        hooks = []

        def grab(name):
            def hook(_mod, _inp, out):
                captured[name] = out

            return hook

        for name in layers:
            if name == INPUT_LAYER:
                continue
            hooks.append(self._sites[name].register_forward_hook(grab(name)))
        try:
            x_norm = self.normalize(x_t)
            if run_task:
                out = self._task_out(x_norm)
            else:
                out = self._encoder_forward(x_norm)
        finally:
            for h in hooks:
                h.remove()
        if INPUT_LAYER in layers:
            captured[INPUT_LAYER] = x_t
        missing = [name for name in layers if name not in captured]
        if missing:
            raise ValidationError(
                f"activation site(s) {missing} did not fire on backbone {self.backbone_id!r}"
            )
        return out, captured

    def _encoder_forward(self, x_norm: torch.Tensor) -> torch.Tensor:
        """Forward that is guaranteed to traverse every activation site."""
        return self.module(x_norm)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    # -- contract operations ----------------------------------------------

    def feature_shape(self, layer: str) -> tuple[int, int, int]:
        """Declared (C, h, w) of a site for the adapter's probe input size."""
        self._check_layers([layer])
        if layer not in self._feature_shapes:
            h, w = self._probe_hw
            probe = torch.zeros(1, 3, h, w, dtype=self.dtype)
            with torch.no_grad():
                _, captured = self._forward(probe, [layer])
            c, fh, fw = captured[layer].shape[1:]
            self._feature_shapes[layer] = (int(c), int(fh), int(fw))
        return self._feature_shapes[layer]

    def extract_features(
        self, x: Image, layers: Sequence[str] | None = None
    ) -> dict[str, np.ndarray]:
        layers = list(layers) if layers is not None else list(self.layers)
        self._check_layers(layers)
        x_t = image_to_tensor(x.data, self.dtype)
        with torch.no_grad():
            _, captured = self._forward(x_t, layers)
        feats = {name: t[0].detach().cpu().numpy() for name, t in captured.items()}
        for name, arr in feats.items():
            if not np.isfinite(arr).all():
                raise CraftRuntimeError(f"non-finite features at layer {name!r}")
        return feats

    def features_tensor(
        self, x_t: torch.Tensor, layers: Sequence[str]
    ) -> dict[str, torch.Tensor]:
        """Differentiable feature capture on an already-batched [0,1] tensor."""
        self._check_layers(layers)
        _, captured = self._forward(x_t, layers)
        return captured

    def task_forward(self, x: Image):
        if self.task_kind == "none":
            raise ValidationError(
                f"backbone {self.backbone_id!r} carries no task head (task_kind none)"
            )
        x_t = image_to_tensor(x.data, self.dtype)
        with torch.no_grad():
            out, _ = self._forward(x_t, [], run_task=True)
        return self._postprocess_task(out, x_t)

    def _postprocess_task(self, out: torch.Tensor, x_t: torch.Tensor):
        if self.task_kind == "classification":
            return out[0].detach().cpu().numpy()
        if self.task_kind == "segmentation":
            return out[0].argmax(dim=0).detach().cpu().numpy()
        raise ValidationError(
            f"adapter {self.backbone_id!r} must override task output handling for "
            f"task kind {self.task_kind!r}"
        )

    def task_scores_batch(self, batch: np.ndarray) -> np.ndarray:
        """(B,H,W,3) -> (B, n_classes) score matrix. Classification only."""
        if self.task_kind != "classification":
            raise ValidationError("task_scores_batch requires a classification head")
        x_t = image_to_tensor(batch, self.dtype)
        with torch.no_grad():
            out, _ = self._forward(x_t, [], run_task=True)
        return out.detach().cpu().numpy()

    def seg_maps_batch(self, batch: np.ndarray) -> np.ndarray:
        """(B,H,W,3) -> (B,H,W) predicted class-index maps. Segmentation only."""
        if self.task_kind != "segmentation":
            raise ValidationError("seg_maps_batch requires a segmentation head")
        x_t = image_to_tensor(batch, self.dtype)
        with torch.no_grad():
            out, _ = self._forward(x_t, [], run_task=True)
        return out.argmax(dim=1).detach().cpu().numpy()

    def task_loss_tensor(self, x_t: torch.Tensor, y) -> torch.Tensor:
        """Differentiable task loss on a [0,1] input batch.

        y is a single label (broadcast over the batch) or one label per
        batch element: an int / int vector for classification, an (H,W) /
        (B,H,W) class map for segmentation.
        """
        out, _ = self._forward(x_t, [], run_task=True)
        if self.task_kind == "classification":
            target = torch.as_tensor(np.asarray(y, dtype=np.int64))
            if target.dim() == 0:
                target = target.repeat(x_t.shape[0])
            return nn.functional.cross_entropy(out, target)
        if self.task_kind == "segmentation":
            target = torch.as_tensor(np.asarray(y, dtype=np.int64))
            if target.dim() == 2:
                target = target[None].expand(x_t.shape[0], -1, -1)
            return nn.functional.cross_entropy(out, target)
        raise ValidationError(
            f"no task loss defined for task kind {self.task_kind!r} on "
            f"backbone {self.backbone_id!r}"
        )

    def input_gradient(
        self,
        loss_fn: Callable[["TorchModelHandle", torch.Tensor], torch.Tensor],
        x: Image,
    ) -> np.ndarray:
        """d(loss)/d(input) as an (H,W,3) array.

        loss_fn receives this handle and the [0,1] (1,3,H,W) input tensor and
        must return a scalar tensor wired to the model's computation (or a
        constant, which yields a zero gradient).
        """
        x_t = image_to_tensor(x.data, self.dtype).requires_grad_(True)
        loss = loss_fn(self, x_t)
        if loss.dim() != 0:
            raise ValidationError(f"loss_fn must return a scalar, got shape {tuple(loss.shape)}")
        if loss.requires_grad:
            (grad,) = torch.autograd.grad(loss, x_t, allow_unused=True)
        else:
            grad = None  # constant loss: zero gradient by definition
        if grad is None:
            grad = torch.zeros_like(x_t)
        arr = tensor_to_image_array(grad)
        if not np.isfinite(arr).all():
            raise CraftRuntimeError(
                f"non-finite input gradient ({self._locate_nonfinite(x_t.detach())})"
            )
        return arr

    def _locate_nonfinite(self, x_t: torch.Tensor) -> str:
        with torch.no_grad():
            try:
                _, captured = self._forward(x_t, self.layers)
            except Exception:
                return "forward pass failed during diagnosis"
        for name in self.layers:
            if not torch.isfinite(captured[name]).all():
                return f"first non-finite activations at layer {name!r}"
        return "activations finite; the defect is in the backward pass"

    # -- identity -----------------------------------------------------------

    def astype(self, dtype: torch.dtype) -> "TorchModelHandle":
        """Deep copy of this handle running at another float precision."""
        clone = copy.deepcopy(self)
        clone.module = clone.module.to(dtype)
        clone._feature_shapes = {}
        return clone

    def digest(self) -> str:
        """Content hash of the parameters and buffers."""
        if self._digest is None:
            h = hashlib.sha256(self.backbone_id.encode())
            for key, tensor in sorted(self.module.state_dict().items()):
                h.update(key.encode())
                arr = tensor.detach().cpu().numpy()
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr).tobytes())
            self._digest = h.hexdigest()
        return self._digest


ModelHandle = TorchModelHandle


# ---------------------------------------------------------------------------
# Module-level operation surface.
# ---------------------------------------------------------------------------


def extract_features(
    model: ModelHandle, x: Image, layers: Sequence[str] | None = None
) -> dict[str, np.ndarray]:
    """Per-layer (C_l, h_l, w_l) activation arrays for the requested sites."""
    return model.extract_features(x, layers)


def task_forward(model: ModelHandle, x: Image):
    """Task output: class scores, detection list, or per-pixel class map."""
    return model.task_forward(x)


def input_gradient(model: ModelHandle, loss_fn, x: Image) -> np.ndarray:
    return model.input_gradient(loss_fn, x)


# ---------------------------------------------------------------------------
# Backbone registry and checkpoints.
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., ModelHandle]] = {}


def register_backbone(name: str):
    def deco(builder):
        _REGISTRY[name] = builder
        return builder

    return deco


def available_backbones() -> list[str]:
    return sorted(_REGISTRY)


def build_model(backbone_id: str, *, task: str = "classification", checkpoint: str | None = None, **kwargs) -> ModelHandle:
    if backbone_id not in _REGISTRY:
        raise ValidationError(
            f"no adapter registered for backbone {backbone_id!r}; "
            f"available: {available_backbones()}"
        )
    return _REGISTRY[backbone_id](task=task, checkpoint=checkpoint, **kwargs)


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return payload


def load_checkpoint_sequence(paths: Sequence[str | Path], *, task: str = "none") -> list[ModelHandle]:
    """Load an ordered list of same-architecture checkpoints into handles."""
    handles: list[ModelHandle] = []
    reference: tuple | None = None
    for path in paths:
        payload = read_checkpoint(path)
        signature = (payload["backbone"], repr(sorted(payload.get("arch", {}).items())))
        if reference is None:
            reference = signature
        elif signature != reference:
            raise ValidationError(
                f"checkpoint {path} is architecture-incompatible with the first "
                f"checkpoint in the sequence ({signature[0]!r} vs {reference[0]!r})"
            )
        handles.append(
            build_model(payload["backbone"], task=task, checkpoint=str(path))
        )
    return handles
