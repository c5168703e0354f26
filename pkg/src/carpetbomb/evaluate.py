"""Task metrics under attack, honoring the contextual-evaluation rules:
top-1 accuracy for classification, mAP with patch-overlap filtering for
detection, and patch-excluded mIoU/mAcc for segmentation.

Contextual protocol: the patch region never contributes to a metric.
Detection drops every prediction whose box has positive intersection
area with the patch rectangle and only evaluates images whose ground
truth stays clear of it; segmentation ignores pixels inside the
rectangle. The same filtering applies to the clean and the attacked
pass, so that predictions confined to the patch region can never move a
result.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Image, Noise, Patch, Placement, apply_noise, apply_patch
from .errors import ValidationError
from .models import ModelHandle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    class_id: int
    confidence: float | None = None

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValidationError(
                f"degenerate box ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})"
            )
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence must lie in [0,1], got {self.confidence}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = 0.0005
    nms_iou: float = 0.45
    match_iou: float = 0.5
    ap_method: str = "area"

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou", "match_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0,1], got {v}")
        if self.ap_method not in ("area", "11point"):
            raise ValidationError(f"unknown AP method {self.ap_method!r}")


@dataclass
class EvalReport:
    task: str
    clean: dict[str, float]
    attacked: dict[str, float] | None
    n_images: int
    attack_digest: str = ""
    config_digest: str = ""

    def __post_init__(self):
        for bundle in (self.clean, self.attacked):
            if bundle is None:
                continue
            for name, value in bundle.items():
                if not (0.0 <= value <= 100.0):
                    raise ValidationError(f"metric {name}={value} outside [0,100]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "clean": self.clean,
                "attacked": self.attacked,
                "n_images": self.n_images,
                "config_digest": self.config_digest,
                "attack_digest": self.attack_digest,
            },
            indent=2,
            sort_keys=True,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            task=raw["task"],
            clean=raw["clean"],
            attacked=raw["attacked"],
            n_images=raw["n_images"],
            attack_digest=raw.get("attack_digest", ""),
            config_digest=raw.get("config_digest", ""),
        )


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


# ---------------------------------------------------------------------------
# Detection primitives.
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(boxes: Sequence[Box], iou_threshold: float) -> list[Box]:
    """Greedy per-class suppression by descending confidence, ties broken
    by ascending input index; a box is suppressed when its overlap with an
    already-kept box of the same class exceeds the threshold."""
    for b in boxes:
        if b.confidence is None:
            raise ValidationError("nms needs confidences on every box")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[int] = []
    for i in order:
        candidate = boxes[i]
        if any(
            boxes[j].class_id == candidate.class_id and iou(boxes[j], candidate) > iou_threshold
            for j in kept
        ):
            continue
        kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def average_precision(
    preds: Mapping[str, Sequence[Box]],
    gts: Mapping[str, Sequence[Box]],
    match_iou: float = 0.5,
    method: str = "area",
) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean.

    Greedy matching by descending confidence: a prediction matches the
    unmatched same-image ground-truth box of its class with the highest
    IoU at or above the threshold. AP integrates the precision envelope
    over recall ("area", the default) or averages precision at the eleven
    canonical recall points ("11point"). Classes with no ground truth are
    excluded from the mean and logged.
    """
    class_ids = sorted({b.class_id for boxes in gts.values() for b in boxes})
    pred_classes = {b.class_id for boxes in preds.values() for b in boxes}
    for missing in sorted(pred_classes - set(class_ids)):
        logger.warning("class %d has predictions but no ground truth; excluded from mAP", missing)
    ap: dict[int, float] = {}
    for cls in class_ids:
        gt_by_image = {
            img: [b for b in boxes if b.class_id == cls] for img, boxes in gts.items()
        }
        n_gt = sum(len(v) for v in gt_by_image.values())
        rows = [
            (b.confidence, img, idx, b)
            for img, boxes in preds.items()
            for idx, b in enumerate(boxes)
            if b.class_id == cls
        ]
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        matched: dict[str, set[int]] = {img: set() for img in gts}
        tp = np.zeros(len(rows))
        for rank, (_, img, _, box) in enumerate(rows):
            candidates = gt_by_image.get(img, [])
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(candidates):
                if j in matched.get(img, set()):
                    continue
                v = iou(box, gt_box)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= match_iou:
                matched.setdefault(img, set()).add(best_j)
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        precision = cum_tp / np.arange(1, len(rows) + 1) if len(rows) else np.array([])
        recall = cum_tp / n_gt if n_gt else np.array([])
        ap[cls] = _integrate_ap(precision, recall, method)
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return ap, mean


def _integrate_ap(precision: np.ndarray, recall: np.ndarray, method: str) -> float:
    if len(precision) == 0:
        return 0.0
    if method == "11point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            total += float(precision[mask].max()) if mask.any() else 0.0
        return total / 11.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    jumps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[jumps + 1] - mrec[jumps]) * mpre[jumps + 1]).sum())


# ---------------------------------------------------------------------------
# Compositing helpers shared by the task evaluations.
# ---------------------------------------------------------------------------


def composite_attack(
    x: Image, attack: Patch | Noise | None, placement: Placement | None
) -> Image:
    if attack is None:
        return x
    if isinstance(attack, Patch):
        if placement is None:
            raise ValidationError("patch evaluation needs a placement")
        return apply_patch(x, attack, placement)
    if isinstance(attack, Noise):
        return apply_noise(x, attack)
    raise ValidationError(f"unknown attack artifact type {type(attack).__name__}")


def _patch_rect(placement: Placement, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    r0, c0 = placement.resolve(shape)
    return r0, c0, r0 + placement.patch_h, c0 + placement.patch_w


def _box_hits_rect(box: Box, rect: tuple[int, int, int, int]) -> bool:
    r0, c0, r1, c1 = rect
    ix = min(box.xmax, c1) - max(box.xmin, c0)
    iy = min(box.ymax, r1) - max(box.ymin, r0)
    return ix > 0 and iy > 0


# ---------------------------------------------------------------------------
# Task evaluations.
# ---------------------------------------------------------------------------


def eval_classification(
    model: ModelHandle,
    image_set: Sequence[Image],
    labels: Sequence[int],
    attack: Patch | Noise | None = None,
    placement: Placement | None = None,
    *,
    batch_size: int = 256,
    attack_digest: str = "",
    config_digest: str = "",
) -> EvalReport:
    """Top-1 accuracy (%), clean and under the composited perturbation."""
    if model.task_kind != "classification":
        raise ValidationError("eval_classification needs a classification head")
    images = list(image_set)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(images):
        raise ValidationError(f"{len(labels)} labels for {len(images)} images")
    if not images:
        raise ValidationError("empty evaluation set")

    def top1(samples: list[Image]) -> float:
        hits = 0
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            scores = model.task_scores_batch(np.stack([img.data for img in chunk]))
            hits += int((scores.argmax(axis=1) == labels[start : start + len(chunk)]).sum())
        return hits / len(samples)

    clean = {"top1": _pct(top1(images))}
    attacked = None
    if attack is not None:
        adv = [composite_attack(x, attack, placement) for x in images]
        attacked = {"top1": _pct(top1(adv))}
    return EvalReport(
        task="classification",
        clean=clean,
        attacked=attacked,
        n_images=len(images),
        attack_digest=attack_digest,
        config_digest=config_digest,
    )


def eval_detection_contextual(
    model: ModelHandle,
    image_set: Sequence[Image],
    gt_boxes: Sequence[Sequence[Box]],
    patch: Patch | None,
    placement: Placement,
    cfg: EvalConfig = EvalConfig(),
    *,
    attack_digest: str = "",
    config_digest: str = "",
) -> EvalReport:
    """Contextual mAP: images whose ground truth touches the patch region
    are dropped, and predictions intersecting it are removed before
    confidence filtering, NMS, and AP."""
    if model.task_kind != "detection":
        raise ValidationError("eval_detection_contextual needs a detection head")
    images = list(image_set)
    if len(gt_boxes) != len(images):
        raise ValidationError("ground-truth boxes must align with images")
    survivors = [
        i
        for i, x in enumerate(images)
        if not any(_box_hits_rect(b, _patch_rect(placement, x.shape)) for b in gt_boxes[i])
    ]
    if not survivors:
        raise ValidationError(
            "no image survives the patch-overlap filter; move the placement away "
            "from the annotated objects"
        )

    def run(with_patch: bool) -> float:
        preds: dict[str, list[Box]] = {}
        gts: dict[str, list[Box]] = {}
        for i in survivors:
            x = images[i]
            rect = _patch_rect(placement, x.shape)
            sample = apply_patch(x, patch, placement) if with_patch else x
            raw = model.task_forward(sample)
            boxes = [b for b in raw if not _box_hits_rect(b, rect)]
            boxes = [b for b in boxes if b.confidence is not None and b.confidence >= cfg.conf_threshold]
            key = x.id or f"image-{i}"
            preds[key] = nms(boxes, cfg.nms_iou)
            gts[key] = list(gt_boxes[i])
        _, mean = average_precision(preds, gts, cfg.match_iou, cfg.ap_method)
        return mean

    clean = {"map": _pct(run(False))}
    attacked = {"map": _pct(run(True))} if patch is not None else None
    return EvalReport(
        task="detection",
        clean=clean,
        attacked=attacked,
        n_images=len(survivors),
        attack_digest=attack_digest,
        config_digest=config_digest,
    )


def _seg_scores(
    confusion: np.ndarray,
) -> tuple[dict[str, float], list[int], list[int]]:
    gt_total = confusion.sum(axis=1)
    pred_total = confusion.sum(axis=0)
    tp = np.diag(confusion)
    union = gt_total + pred_total - tp
    iou_classes = [c for c in range(len(tp)) if union[c] > 0]
    acc_classes = [c for c in range(len(tp)) if gt_total[c] > 0]
    miou = float(np.mean([tp[c] / union[c] for c in iou_classes])) if iou_classes else 0.0
    macc = float(np.mean([tp[c] / gt_total[c] for c in acc_classes])) if acc_classes else 0.0
    return {"miou": _pct(miou), "macc": _pct(macc)}, iou_classes, acc_classes


def eval_segmentation(
    model: ModelHandle,
    image_set: Sequence[Image],
    gt_masks: Sequence[np.ndarray],
    patch: Patch | None,
    placement: Placement,
    *,
    batch_size: int = 128,
    attack_digest: str = "",
    config_digest: str = "",
) -> EvalReport:
    """Macro-averaged IoU and per-class accuracy over pixels outside the
    patch rectangle. Classes absent from both prediction and ground truth
    are excluded from mIoU; classes with no ground-truth pixels are
    excluded from mAcc (both logged)."""
    if model.task_kind != "segmentation":
        raise ValidationError("eval_segmentation needs a segmentation head")
    images = list(image_set)
    if len(gt_masks) != len(images):
        raise ValidationError("ground-truth masks must align with images")
    if not images:
        raise ValidationError("empty evaluation set")
    n_classes = int(max(int(m.max()) for m in gt_masks)) + 1

    def confusion(with_patch: bool) -> np.ndarray:
        conf = None
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            samples = [
                apply_patch(x, patch, placement) if with_patch else x for x in chunk
            ]
            pred = model.seg_maps_batch(np.stack([img.data for img in samples]))
            width = max(n_classes, int(pred.max()) + 1)
            if conf is None:
                conf = np.zeros((width, width), dtype=np.int64)
            elif width > conf.shape[0]:
                grown = np.zeros((width, width), dtype=np.int64)
                grown[: conf.shape[0], : conf.shape[1]] = conf
                conf = grown
            for offset, x in enumerate(chunk):
                rect = _patch_rect(placement, x.shape)
                keep = np.ones(x.shape, dtype=bool)
                keep[rect[0] : rect[2], rect[1] : rect[3]] = False
                gt = np.asarray(gt_masks[start + offset], dtype=np.int64)
                pair = gt[keep] * conf.shape[0] + pred[offset][keep]
                conf += np.bincount(pair, minlength=conf.size).reshape(conf.shape)
        return conf

    clean_conf = confusion(False)
    clean, iou_cls, acc_cls = _seg_scores(clean_conf)
    excluded = sorted(set(range(clean_conf.shape[0])) - set(iou_cls))
    if excluded:
        logger.info("classes %s absent from prediction and ground truth; excluded", excluded)
    attacked = None
    if patch is not None:
        attacked, _, _ = _seg_scores(confusion(True))
    return EvalReport(
        task="segmentation",
        clean=clean,
        attacked=attacked,
        n_images=len(images),
        attack_digest=attack_digest,
        config_digest=config_digest,
    )
