"""Domain types, mask construction, and perturbation compositing.

Pixel data is float in [0,1], channel-last (H, W, 3), before any
model-specific normalization. All operations here are pure functions on
value data and safe to call concurrently.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementError, ValidationError

MAGIC_PATCH = b"CBP1"
MAGIC_NOISE = b"CBN1"


def _check_pixels(data: np.ndarray, what: str) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValidationError(f"{what} must have shape (H, W, 3), got {data.shape}")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise ValidationError(f"{what} must be at least 1x1, got {data.shape[:2]}")
    if not np.issubdtype(data.dtype, np.floating):
        raise ValidationError(f"{what} must be float, got dtype {data.dtype}")
    if not np.isfinite(data).all():
        raise ValidationError(f"{what} contains non-finite values")
    return data


def _check_unit_range(data: np.ndarray, what: str) -> None:
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"{what} values must lie in [0,1], got range [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class Image:
    """A 3-channel pixel array in [0,1] with a string identifier."""

    data: np.ndarray
    id: str = ""

    def __post_init__(self):
        data = _check_pixels(self.data, "image")
        _check_unit_range(data, "image")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True, eq=False)
class Patch:
    """A spatially confined perturbation; pixels in [0,1], magnitude-unconstrained."""

    data: np.ndarray
    created_by: str = ""

    def __post_init__(self):
        data = _check_pixels(self.data, "patch")
        _check_unit_range(data, "patch")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class NoiseBudget:
    """Max-norm bound for additive noise."""

    epsilon: float
    norm_order: str = "inf"

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValidationError(f"noise budget epsilon must be > 0, got {self.epsilon}")
        if self.norm_order != "inf":
            raise ValidationError("only the max-norm (norm_order='inf') is supported")


@dataclass(frozen=True, eq=False)
class Noise:
    """A full-image additive perturbation bounded in max-norm by its budget."""

    data: np.ndarray
    budget: NoiseBudget

    def __post_init__(self):
        data = _check_pixels(self.data, "noise")
        limit = np.asarray(self.budget.epsilon, dtype=data.dtype)
        peak = np.abs(data).max()
        if peak > limit:
            raise ValidationError(
                f"noise max-norm {float(peak)} exceeds budget epsilon {self.budget.epsilon}"
            )
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class Placement:
    """Where a patch sits inside an image.

    ``top_left_offset`` anchors the patch at (offset_row, offset_col);
    ``centered`` computes floor((H-h)/2, (W-w)/2) per image. Zero-area
    placements are rejected at construction.
    """

    mode: str
    patch_h: int
    patch_w: int
    offset_row: int = 0
    offset_col: int = 0

    def __post_init__(self):
        if self.mode not in ("top_left_offset", "centered"):
            raise ValidationError(f"unknown placement mode {self.mode!r}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValidationError(
                f"placement must cover a non-empty rectangle, got {self.patch_h}x{self.patch_w}"
            )
        if self.mode == "top_left_offset" and (self.offset_row < 0 or self.offset_col < 0):
            raise PlacementError("placement offsets must be non-negative")

    def resolve(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        """Top-left corner (row, col) of the patch rectangle inside an H x W image."""
        h_img, w_img = image_shape
        if self.mode == "centered":
            r0 = (h_img - self.patch_h) // 2
            c0 = (w_img - self.patch_w) // 2
            if r0 < 0:
                raise PlacementError(
                    f"patch height {self.patch_h} exceeds image height {h_img} (bottom edge)"
                )
            if c0 < 0:
                raise PlacementError(
                    f"patch width {self.patch_w} exceeds image width {w_img} (right edge)"
                )
            return r0, c0
        r0, c0 = self.offset_row, self.offset_col
        if r0 + self.patch_h > h_img:
            raise PlacementError(
                f"placement overflows the bottom edge: rows {r0}..{r0 + self.patch_h - 1} "
                f"in an image of height {h_img}"
            )
        if c0 + self.patch_w > w_img:
            raise PlacementError(
                f"placement overflows the right edge: cols {c0}..{c0 + self.patch_w - 1} "
                f"in an image of width {w_img}"
            )
        return r0, c0


@dataclass(frozen=True, eq=False)
class PixelMask:
    """Binary image-space mask; 1 exactly on the patch rectangle."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"pixel mask must be 2-D, got shape {data.shape}")
        data = data.astype(np.uint8, copy=False)
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("pixel mask elements must be 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class FeatureMask:
    """Binary mask at a layer's spatial resolution; 0 where the patch footprint lands."""

    data: np.ndarray
    layer: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"feature mask must be 2-D, got shape {data.shape}")
        data = data.astype(np.uint8, copy=False)
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("feature mask elements must be 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def make_pixel_mask(image_shape: tuple[int, int], placement: Placement) -> PixelMask:
    """Binary H x W mask that is 1 on the placement rectangle and 0 elsewhere."""
    h_img, w_img = image_shape
    r0, c0 = placement.resolve(image_shape)
    mask = np.zeros((h_img, w_img), dtype=np.uint8)
    mask[r0 : r0 + placement.patch_h, c0 : c0 + placement.patch_w] = 1
    return PixelMask(mask)


def apply_patch(x: Image, delta: Patch, placement: Placement) -> Image:
    """Composite a patch into an image: the rectangle becomes the patch, the rest stays x."""
    if (placement.patch_h, placement.patch_w) != delta.shape:
        raise ValidationError(
            f"placement rectangle {placement.patch_h}x{placement.patch_w} does not match "
            f"patch dimensions {delta.shape[0]}x{delta.shape[1]}"
        )
    r0, c0 = placement.resolve(x.shape)
    out = x.data.copy()
    out[r0 : r0 + placement.patch_h, c0 : c0 + placement.patch_w] = delta.data.astype(
        out.dtype, copy=False
    )
    return Image(out, id=x.id)


def apply_noise(x: Image, delta: Noise) -> Image:
    """Add a bounded noise field to an image and clip the result to [0,1]."""
    if x.data.shape != delta.data.shape:
        raise ValidationError(
            f"noise shape {delta.data.shape} does not match image shape {x.data.shape}"
        )
    out = np.clip(x.data + delta.data.astype(x.data.dtype, copy=False), 0.0, 1.0)
    return Image(out, id=x.id)


def derive_feature_mask(
    pixel_mask: PixelMask, layer_shape: tuple[int, int], layer: str = ""
) -> FeatureMask:
    """Downsample a pixel mask to a layer grid, conservatively.

    Cell (i, j) owns the real-valued block [i*H/h_l, (i+1)*H/h_l) x
    [j*W/w_l, (j+1)*W/w_l). A pixel (p, q) occupies the unit square
    [p, p+1) x [q, q+1). The cell is 0 iff any mask-1 pixel's square
    intersects the block, 1 otherwise.
    """
    h_img, w_img = pixel_mask.shape
    h_l, w_l = layer_shape
    if h_l < 1 or w_l < 1:
        raise ValidationError(f"layer shape must be positive, got {layer_shape}")
    if h_l > h_img or w_l > w_img:
        raise ValidationError(
            f"layer shape {layer_shape} exceeds pixel mask shape {pixel_mask.shape}"
        )
    # R[i, p]: pixel row p overlaps cell row i; same for columns. Then
    # zero-cells are exactly (R @ M @ C.T) > 0.
    rows = np.arange(h_img, dtype=np.float64)
    cols = np.arange(w_img, dtype=np.float64)
    i = np.arange(h_l, dtype=np.float64)
    j = np.arange(w_l, dtype=np.float64)
    row_lo = i * h_img / h_l
    row_hi = (i + 1) * h_img / h_l
    col_lo = j * w_img / w_l
    col_hi = (j + 1) * w_img / w_l
    overlap_r = (rows[None, :] < row_hi[:, None]) & (rows[None, :] + 1 > row_lo[:, None])
    overlap_c = (cols[None, :] < col_hi[:, None]) & (cols[None, :] + 1 > col_lo[:, None])
    hits = overlap_r.astype(np.int64) @ pixel_mask.data.astype(np.int64) @ overlap_c.T.astype(np.int64)
    return FeatureMask((hits == 0).astype(np.uint8), layer=layer)


def clip_unit(data: np.ndarray) -> np.ndarray:
    """Elementwise min(max(v, 0), 1); rejects non-finite input."""
    data = np.asarray(data)
    if not np.isfinite(data).all():
        bad = "NaN" if np.isnan(data).any() else "infinite"
        raise ValidationError(f"cannot clip {bad} values")
    return np.clip(data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Perturbation persistence.
#
# Shared binary container: 4-byte magic ("CBP1" for patches, "CBN1" for
# noise), u32 LE height, u32 LE width, then h*w*3 float32 LE values
# row-major channel-last, then a u32 length-prefixed UTF-8 JSON metadata
# blob. An 8-bit PNG preview is written alongside for human inspection;
# the binary is authoritative.
# ---------------------------------------------------------------------------


def _pack_blob(magic: bytes, data: np.ndarray, metadata: dict) -> bytes:
    h, w = data.shape[0], data.shape[1]
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<II", h, w) + payload + struct.pack("<I", len(meta)) + meta


def _unpack_blob(raw: bytes, path: Path) -> tuple[bytes, np.ndarray, dict]:
    if len(raw) < 12:
        raise ValidationError(f"{path}: truncated perturbation file")
    magic = raw[:4]
    if magic not in (MAGIC_PATCH, MAGIC_NOISE):
        raise ValidationError(f"{path}: unrecognized magic {magic!r}")
    h, w = struct.unpack_from("<II", raw, 4)
    n = h * w * 3 * 4
    if len(raw) < 12 + n + 4:
        raise ValidationError(f"{path}: truncated perturbation payload")
    data = np.frombuffer(raw, dtype="<f4", count=h * w * 3, offset=12).reshape(h, w, 3)
    (meta_len,) = struct.unpack_from("<I", raw, 12 + n)
    meta_raw = raw[16 + n : 16 + n + meta_len]
    if len(meta_raw) != meta_len:
        raise ValidationError(f"{path}: truncated metadata blob")
    metadata = json.loads(meta_raw.decode("utf-8"))
    return magic, data.astype(np.float32), metadata


def _write_preview(data: np.ndarray, path: Path) -> None:
    from PIL import Image as PILImage

    preview = np.clip(np.round(np.asarray(data, dtype=np.float64) * 255.0), 0, 255)
    PILImage.fromarray(preview.astype(np.uint8), mode="RGB").save(path)


def save_patch(patch: Patch, path: str | Path, metadata: dict | None = None) -> Path:
    """Write a patch binary plus a lossy PNG preview next to it."""
    path = Path(path)
    meta = {"kind": "patch", "created_by": patch.created_by}
    meta.update(metadata or {})
    path.write_bytes(_pack_blob(MAGIC_PATCH, patch.data, meta))
    _write_preview(patch.data, path.with_suffix(".png"))
    return path


def load_patch(path: str | Path) -> tuple[Patch, dict]:
    path = Path(path)
    magic, data, metadata = _unpack_blob(path.read_bytes(), path)
    if magic != MAGIC_PATCH:
        raise ValidationError(f"{path}: expected a patch file, found noise")
    return Patch(data, created_by=str(metadata.get("created_by", ""))), metadata


def save_noise(noise: Noise, path: str | Path, metadata: dict | None = None) -> Path:
    """Write a noise binary plus a PNG preview of the shifted field (0.5 + delta)."""
    path = Path(path)
    meta = {"kind": "noise", "epsilon": noise.budget.epsilon}
    meta.update(metadata or {})
    path.write_bytes(_pack_blob(MAGIC_NOISE, noise.data, meta))
    _write_preview(np.clip(noise.data + 0.5, 0.0, 1.0), path.with_suffix(".png"))
    return path


def load_noise(path: str | Path) -> tuple[Noise, dict]:
    path = Path(path)
    magic, data, metadata = _unpack_blob(path.read_bytes(), path)
    if magic != MAGIC_NOISE:
        raise ValidationError(f"{path}: expected a noise file, found a patch")
    epsilon = float(metadata.get("epsilon", np.abs(data).max() or 1.0))
    return Noise(data, NoiseBudget(epsilon)), metadata


def load_attack(path: str | Path) -> tuple[Patch | Noise, dict]:
    """Load either perturbation kind, dispatching on the magic bytes."""
    path = Path(path)
    magic, _, _ = _unpack_blob(path.read_bytes(), path)
    if magic == MAGIC_PATCH:
        return load_patch(path)
    return load_noise(path)
