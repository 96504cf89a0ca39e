"""Axis-aligned box and binary-mask arithmetic.

Boxes use a half-open integer pixel convention: x_max and y_max are
exclusive, so area = (x_max - x_min) * (y_max - y_min) and crops compose
without off-by-one bookkeeping. Empty boxes are unrepresentable; "no box"
is expressed as None throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @staticmethod
    def from_tuple(t) -> "BBox":
        x_min, y_min, x_max, y_max = (int(v) for v in t)
        return BBox(x_min, y_min, x_max, y_max)


@dataclass(frozen=True)
class Dims:
    """Positive raster dimensions in pixels."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"non-positive dims {self.width}x{self.height}")


class BinaryMask:
    """Per-pixel foreground raster with a confidence score in [0, 1]."""

    def __init__(self, bits: np.ndarray, score: float = 1.0):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        self.bits = bits
        self.score = float(score)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BinaryMask)
            and self.score == other.score
            and np.array_equal(self.bits, other.bits)
        )


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


def pairwise_intersection(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Intersection pixel counts for every (a, b) pair, as an (N, M) int array.

    Inputs are (N, 4) / (M, 4) arrays of half-open [x_min, y_min, x_max, y_max]
    rows. Ufuncs run in place, and the arithmetic drops to int32 when the
    coordinates provably cannot overflow it (overlaps are bounded by the
    coordinate magnitude, so products stay below 2**31 for |coords| < 46341).
    """
    a = np.asarray(boxes_a)
    b = np.asarray(boxes_b)
    bound = max(int(np.abs(a).max(initial=0)), int(np.abs(b).max(initial=0)))
    dtype = np.int32 if bound < 46341 else np.int64
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    ix = np.minimum(a[:, None, 2], b[None, :, 2])
    np.subtract(ix, np.maximum(a[:, None, 0], b[None, :, 0]), out=ix)
    np.clip(ix, 0, None, out=ix)
    iy = np.minimum(a[:, None, 3], b[None, :, 3])
    np.subtract(iy, np.maximum(a[:, None, 1], b[None, :, 1]), out=iy)
    np.clip(iy, 0, None, out=iy)
    np.multiply(ix, iy, out=ix)
    return ix


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box arrays, shape (N, M)."""
    a = np.asarray(boxes_a, dtype=np.int64)
    b = np.asarray(boxes_b, dtype=np.int64)
    inter = pairwise_intersection(a, b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def mask_to_bbox(m: BinaryMask) -> BBox | None:
    """Tightest half-open box containing all foreground pixels; None if empty."""
    ys, xs = np.nonzero(m.bits)
    if xs.size == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def area_ratio_percent(b: BBox, d: Dims) -> float:
    """Share of the image area covered by the box, in percent."""
    return 100.0 * b.area() / (d.width * d.height)


def remap_to_original(b_in_crop: BBox, crop_origin: tuple[int, int]) -> BBox:
    """Translate a crop-space box back into original-image coordinates."""
    ox, oy = crop_origin
    return BBox(b_in_crop.x_min + ox, b_in_crop.y_min + oy,
                b_in_crop.x_max + ox, b_in_crop.y_max + oy)


def clamp_bbox(b: BBox, d: Dims) -> BBox | None:
    """Intersect a box with the image rectangle; None if nothing remains."""
    x_min = max(b.x_min, 0)
    y_min = max(b.y_min, 0)
    x_max = min(b.x_max, d.width)
    y_max = min(b.y_max, d.height)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BBox(x_min, y_min, x_max, y_max)


def expand_bbox(b: BBox, margin_fraction: float, d: Dims) -> BBox:
    """Grow each side by margin_fraction of the box dimension, clamped to d."""
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be >= 0")
    mx = int(round(b.width * margin_fraction))
    my = int(round(b.height * margin_fraction))
    grown = BBox(b.x_min - mx, b.y_min - my, b.x_max + mx, b.y_max + my)
    clamped = clamp_bbox(grown, d)
    if clamped is None:
        # Box fully outside the image; callers only expand boxes already
        # clamped inside, so this is unreachable in the pipeline.
        raise ValueError(f"expanded box {grown.as_tuple()} is outside {d}")
    return clamped
