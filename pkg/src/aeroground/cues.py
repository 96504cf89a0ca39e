"""Decode red-box highlights painted by the image editor into box cues.

The editor communicates localization by drawing red rectangles onto the
image; this module turns those strokes back into machine-readable boxes
via color thresholding and connected-component analysis. An axis-aligned
outline's tight bounding box is the drawn rectangle itself, so component
bboxes recover both outlined and filled highlights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import BBox, BinaryMask
from .imaging import ImageBuffer

# 8-connectivity for component labeling
_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class RedCueParams:
    """Thresholds for detecting red highlight strokes.

    r_min below 255 tolerates anti-aliased stroke edges.
    """

    r_min: int = 200
    g_max: int = 80
    b_max: int = 80
    min_component_area: int = 25
    nesting_containment: float = 0.9

    def __post_init__(self) -> None:
        for name in ("r_min", "g_max", "b_max"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise ValueError(f"{name}={v} outside [0, 255]")
        if self.min_component_area < 1:
            raise ValueError("min_component_area must be >= 1")
        if not 0.0 <= self.nesting_containment <= 1.0:
            raise ValueError("nesting_containment must be in [0, 1]")


@dataclass(frozen=True)
class CueSet:
    """Ordered box cues recovered from one edited image."""

    boxes: tuple[BBox, ...]
    source: str = "diffusion_edit"

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class Component:
    """One 8-connected foreground component: pixel count and tight bbox."""

    pixel_count: int
    bbox: BBox


def red_pixel_mask(img: ImageBuffer, p: RedCueParams) -> BinaryMask:
    """Foreground where R >= r_min, G <= g_max and B <= b_max (inclusive)."""
    px = img.pixels
    bits = (px[:, :, 0] >= p.r_min) & (px[:, :, 1] <= p.g_max) & (px[:, :, 2] <= p.b_max)
    return BinaryMask(bits, score=1.0)


def connected_components(m: BinaryMask) -> list[Component]:
    """8-connected foreground components, largest pixel count first.

    Ties are broken by the component bbox's (y_min, x_min).
    """
    labels, n = ndimage.label(m.bits, structure=_STRUCTURE)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel())[1:]
    comps = []
    for idx, sl in enumerate(ndimage.find_objects(labels)):
        ys, xs = sl
        comps.append(Component(
            pixel_count=int(counts[idx]),
            bbox=BBox(int(xs.start), int(ys.start), int(xs.stop), int(ys.stop)),
        ))
    comps.sort(key=lambda c: (-c.pixel_count, c.bbox.y_min, c.bbox.x_min))
    return comps


def _containment(inner: BBox, outer: BBox) -> float:
    """Fraction of inner's area covered by outer."""
    ix = min(inner.x_max, outer.x_max) - max(inner.x_min, outer.x_min)
    iy = min(inner.y_max, outer.y_max) - max(inner.y_min, outer.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    return (ix * iy) / inner.area()


def extract_cues(edited: ImageBuffer, p: RedCueParams) -> CueSet:
    """Recover box cues from red highlights in an edited image.

    Components below min_component_area are dropped; a box mostly contained
    in a larger one (containment >= nesting_containment) is merged into the
    outer box, which absorbs double-stroked rectangles. Output keeps the
    descending-pixel-count order of the surviving components.
    """
    mask = red_pixel_mask(edited, p)
    comps = [c for c in connected_components(mask) if c.pixel_count >= p.min_component_area]

    dropped: set[int] = set()
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            if i in dropped or j in dropped:
                continue
            a, b = comps[i].bbox, comps[j].bbox
            # the smaller-area box is the inner candidate; equal areas keep
            # the earlier (larger component) box
            outer_idx, inner_idx = (i, j) if a.area() >= b.area() else (j, i)
            if _containment(comps[inner_idx].bbox, comps[outer_idx].bbox) >= p.nesting_containment:
                dropped.add(inner_idx)

    boxes = tuple(c.bbox for k, c in enumerate(comps) if k not in dropped)
    return CueSet(boxes=boxes)
