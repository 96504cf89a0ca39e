from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aeroground.geometry import BBox
from aeroground.imaging import ImageBuffer


def gray_noise_image(width: int, height: int, seed: int = 0) -> ImageBuffer:
    """Random gray texture: no pixel can satisfy the red-cue predicate, so
    painted red strokes are the only cue source."""
    rng = np.random.default_rng(seed)
    v = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    return ImageBuffer(np.stack([v, v, v], axis=-1))


def solid_image(width: int, height: int, rgb=(30, 60, 90)) -> ImageBuffer:
    px = np.zeros((height, width, 3), dtype=np.uint8)
    px[:, :] = rgb
    return ImageBuffer(px)


def paint_outline(img: ImageBuffer, box: BBox, stroke: int = 3,
                  color=(255, 0, 0)) -> ImageBuffer:
    """Rectangle outline with the stroke lying inside the box bounds."""
    out = img.pixels.copy()
    s = min(stroke, box.width, box.height)
    out[box.y_min:box.y_min + s, box.x_min:box.x_max] = color
    out[box.y_max - s:box.y_max, box.x_min:box.x_max] = color
    out[box.y_min:box.y_max, box.x_min:box.x_min + s] = color
    out[box.y_min:box.y_max, box.x_max - s:box.x_max] = color
    return ImageBuffer(out)


def random_truth_box(rng: np.random.Generator, width: int, height: int,
                     min_size: int = 10, max_size: int = 64,
                     margin: int = 24) -> BBox:
    w = int(rng.integers(min_size, max_size + 1))
    h = int(rng.integers(min_size, max_size + 1))
    x0 = int(rng.integers(margin, width - margin - w + 1))
    y0 = int(rng.integers(margin, height - margin - h + 1))
    return BBox(x0, y0, x0 + w, y0 + h)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
