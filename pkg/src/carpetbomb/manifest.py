"""Dataset manifests: a JSON-lines file with a header record followed by
one entry per sample.

Header: {"task": "classification"|"detection"|"segmentation",
         "split": "train_attack"|"eval",
         "resize": [H, W] (optional), "n_classes": int (optional),
         "size": int (optional declared entry count)}

Entries by task:
  classification  {"image": path, "label": int}
  detection       {"image": path, "boxes": [[xmin,ymin,xmax,ymax,class], ...]}
  segmentation    {"image": path, "mask": path}

Paths are relative to the manifest's directory. Every referenced file
must exist at load time; validation failures report the offending line
number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .core import Image
from .errors import ValidationError
from .evaluate import Box

TASKS = ("classification", "detection", "segmentation")
SPLITS = ("train_attack", "eval")


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: int | None = None
    boxes: tuple[Box, ...] | None = None
    mask: str | None = None


@dataclass
class DatasetManifest:
    task: str
    split: str
    entries: list[ManifestEntry]
    root: Path
    resize: tuple[int, int] | None = None
    n_classes: int | None = None
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].image

    def mask_path(self, i: int) -> Path:
        entry = self.entries[i]
        if entry.mask is None:
            raise ValidationError("entry carries no mask path")
        return self.root / entry.mask

    @property
    def labels(self) -> np.ndarray:
        if self.task != "classification":
            raise ValidationError(f"labels undefined for task {self.task!r}")
        return np.asarray([e.label for e in self.entries], dtype=np.int64)

    @property
    def boxes(self) -> list[list[Box]]:
        if self.task != "detection":
            raise ValidationError(f"boxes undefined for task {self.task!r}")
        return [list(e.boxes) for e in self.entries]


def _parse_box(raw, lineno: int) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 5:
        raise ValidationError(
            f"line {lineno}: box must be [xmin, ymin, xmax, ymax, class], got {raw!r}"
        )
    xmin, ymin, xmax, ymax, cls = raw
    if not (xmin < xmax and ymin < ymax):
        raise ValidationError(f"line {lineno}: degenerate box {raw!r}")
    if int(cls) < 0:
        raise ValidationError(f"line {lineno}: negative class id {cls!r}")
    return Box(float(xmin), float(ymin), float(xmax), float(ymax), int(cls))


def _parse_entry(raw: dict, task: str, n_classes: int | None, lineno: int) -> ManifestEntry:
    if "image" not in raw or not isinstance(raw["image"], str):
        raise ValidationError(f"line {lineno}: entry needs an 'image' path")
    if task == "classification":
        label = raw.get("label")
        if not isinstance(label, int) or isinstance(label, bool):
            raise ValidationError(f"line {lineno}: classification entry needs an int 'label'")
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise ValidationError(
                f"line {lineno}: label {label} out of range"
                + (f" [0, {n_classes})" if n_classes is not None else "")
            )
        return ManifestEntry(image=raw["image"], label=label)
    if task == "detection":
        if "boxes" not in raw or not isinstance(raw["boxes"], list):
            raise ValidationError(f"line {lineno}: detection entry needs a 'boxes' list")
        boxes = tuple(_parse_box(b, lineno) for b in raw["boxes"])
        return ManifestEntry(image=raw["image"], boxes=boxes)
    mask = raw.get("mask")
    if not isinstance(mask, str):
        raise ValidationError(f"line {lineno}: segmentation entry needs a 'mask' path")
    return ManifestEntry(image=raw["image"], mask=mask)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest; entry order is preserved."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    root = path.parent
    lines = path.read_text().splitlines()
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
    if not records:
        raise ValidationError(f"{path}: manifest has no entries")
    header_line, header = records[0]
    if not isinstance(header, dict) or "task" not in header:
        raise ValidationError(f"{path}: line {header_line}: first record must be a header with 'task'")
    task = header["task"]
    if task not in TASKS:
        raise ValidationError(f"{path}: unknown task {task!r}; expected one of {TASKS}")
    split = header.get("split", "eval")
    if split not in SPLITS:
        raise ValidationError(f"{path}: unknown split {split!r}; expected one of {SPLITS}")
    resize = header.get("resize")
    if resize is not None:
        if not (isinstance(resize, list) and len(resize) == 2):
            raise ValidationError(f"{path}: resize must be [H, W], got {resize!r}")
        resize = (int(resize[0]), int(resize[1]))
    n_classes = header.get("n_classes")
    entries = []
    for lineno, raw in records[1:]:
        try:
            entries.append(_parse_entry(raw, task, n_classes, lineno))
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    if not entries:
        raise ValidationError(f"{path}: manifest has no entries")
    declared = header.get("size")
    if declared is not None and declared != len(entries):
        raise ValidationError(
            f"{path}: header declares {declared} entries but {len(entries)} are present"
        )
    manifest = DatasetManifest(
        task=task,
        split=split,
        entries=entries,
        root=root,
        resize=resize,
        n_classes=n_classes,
        path=path,
    )
    for i, entry in enumerate(entries):
        if not manifest.image_path(i).exists():
            raise ValidationError(f"{path}: line {records[i + 1][0]}: missing image file {entry.image}")
        if task == "segmentation" and not manifest.mask_path(i).exists():
            raise ValidationError(f"{path}: line {records[i + 1][0]}: missing mask file {entry.mask}")
    return manifest


def check_disjoint(a: DatasetManifest, b: DatasetManifest) -> None:
    """Train/eval splits must not share image files."""
    paths_a = {str(a.image_path(i).resolve()) for i in range(len(a))}
    paths_b = {str(b.image_path(i).resolve()) for i in range(len(b))}
    shared = paths_a & paths_b
    if shared:
        sample = sorted(shared)[:3]
        raise ValidationError(
            f"manifests {a.path} and {b.path} share {len(shared)} image file(s), e.g. {sample}"
        )


# ---------------------------------------------------------------------------
# Image and mask I/O.
# ---------------------------------------------------------------------------


def load_image_file(path: str | Path, resize: tuple[int, int] | None = None) -> Image:
    path = Path(path)
    with PILImage.open(path) as pil:
        pil = pil.convert("RGB")
        if resize is not None:
            pil = pil.resize((resize[1], resize[0]), PILImage.BILINEAR)
        data = np.asarray(pil, dtype=np.float32) / 255.0
    return Image(data, id=str(path))


def save_image_file(image: Image, path: str | Path) -> Path:
    path = Path(path)
    data = np.clip(np.round(image.data.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)
    return path


def load_mask_file(path: str | Path, resize: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    with PILImage.open(path) as pil:
        pil = pil.convert("L")
        if resize is not None:
            pil = pil.resize((resize[1], resize[0]), PILImage.NEAREST)
        return np.asarray(pil, dtype=np.int64)


def save_mask_file(mask: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise ValidationError("mask class indices must fit in uint8 for PNG storage")
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return path


class ManifestImageSource(Sequence):
    """Lazy, order-preserving Image sequence over a manifest with a small
    most-recently-used cache."""

    def __init__(self, manifest: DatasetManifest, cache_size: int = 256):
        self.manifest = manifest
        self.cache_size = cache_size
        self._cache: dict[int, Image] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int) -> Image:
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if i in self._cache:
            return self._cache[i]
        image = load_image_file(self.manifest.image_path(i), self.manifest.resize)
        if len(self._cache) >= self.cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[i] = image
        return image

    def seg_map(self, i: int) -> np.ndarray:
        return load_mask_file(self.manifest.mask_path(i), self.manifest.resize)


# ---------------------------------------------------------------------------
# Manifest writers (used by the desk-scale scripts and tests).
# ---------------------------------------------------------------------------


def write_classification_manifest(
    directory: str | Path,
    images: Sequence[Image],
    labels: Sequence[int],
    *,
    split: str,
    n_classes: int | None = None,
    name: str = "manifest.jsonl",
) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = [
        {"task": "classification", "split": split, "size": len(images)}
        | ({"n_classes": n_classes} if n_classes is not None else {})
    ]
    for i, (image, label) in enumerate(zip(images, labels)):
        rel = f"images/{i:06d}.png"
        save_image_file(image, directory / rel)
        rows.append({"image": rel, "label": int(label)})
    path = directory / name
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def write_segmentation_manifest(
    directory: str | Path,
    images: Sequence[Image],
    seg_maps: Sequence[np.ndarray],
    *,
    split: str,
    name: str = "manifest.jsonl",
) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    rows = [{"task": "segmentation", "split": split, "size": len(images)}]
    for i, (image, mask) in enumerate(zip(images, seg_maps)):
        rel_img = f"images/{i:06d}.png"
        rel_mask = f"masks/{i:06d}.png"
        save_image_file(image, directory / rel_img)
        save_mask_file(mask, directory / rel_mask)
        rows.append({"image": rel_img, "mask": rel_mask})
    path = directory / name
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def write_detection_manifest(
    directory: str | Path,
    images: Sequence[Image],
    boxes: Sequence[Sequence[Box]],
    *,
    split: str,
    name: str = "manifest.jsonl",
) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = [{"task": "detection", "split": split, "size": len(images)}]
    for i, (image, image_boxes) in enumerate(zip(images, boxes)):
        rel = f"images/{i:06d}.png"
        save_image_file(image, directory / rel)
        rows.append(
            {
                "image": rel,
                "boxes": [
                    [b.xmin, b.ymin, b.xmax, b.ymax, b.class_id] for b in image_boxes
                ],
            }
        )
    path = directory / name
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path
