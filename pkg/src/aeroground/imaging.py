"""Pixel rasters and the enhancement chain.

The chain runs luminance-only contrast enhancement: sRGB is decoded to
CIELAB (D65 white, 2-degree observer), CLAHE is applied to the L channel,
the result is recombined with the untouched chroma channels, converted
back to sRGB, and finally sharpened with an unsharp mask.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

# D65 reference white and sRGB <-> XYZ matrices (linear-light, 0..1 scale).
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
])
_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0

CLAHE_BINS = 256  # L channel is quantized to this many histogram bins


class ImageBuffer:
    """8-bit interleaved RGB raster, stored as an (H, W, 3) uint8 array."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if pixels.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {pixels.dtype}")
        self.pixels = pixels

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)


class LabImage:
    """CIELAB raster: float (H, W, 3) array with channels L, a, b."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {values.shape}")
        L = values[:, :, 0]
        if L.min() < 0.0 or L.max() > 100.0:
            raise ValueError("L channel outside [0, 100]")
        self.values = values

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> np.ndarray:
        return self.values[:, :, 0]

    @property
    def a(self) -> np.ndarray:
        return self.values[:, :, 1]

    @property
    def b(self) -> np.ndarray:
        return self.values[:, :, 2]


@dataclass(frozen=True)
class EnhanceParams:
    """Parameters for the enhancement chain (values the method leaves open)."""

    clahe_clip_limit: float = 2.0
    clahe_tile_grid: tuple[int, int] = (8, 8)  # (cols, rows)
    unsharp_sigma: float = 1.5
    unsharp_amount: float = 0.5

    def __post_init__(self) -> None:
        if self.clahe_clip_limit <= 0:
            raise ValueError("clahe_clip_limit must be > 0")
        cols, rows = self.clahe_tile_grid
        if cols < 1 or rows < 1:
            raise ValueError("clahe_tile_grid entries must be positive")
        if self.unsharp_sigma <= 0:
            raise ValueError("unsharp_sigma must be > 0")
        if self.unsharp_amount < 0:
            raise ValueError("unsharp_amount must be >= 0")


# ---------------------------------------------------------------------------
# Color space conversion
# ---------------------------------------------------------------------------

def srgb_to_lab(img: ImageBuffer) -> LabImage:
    """Decode sRGB to CIELAB under D65."""
    c = img.pixels.astype(np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)
    fx, fy, fz = f[:, :, 0], f[:, :, 1], f[:, :, 2]
    out = np.empty_like(xyz)
    out[:, :, 0] = np.clip(116.0 * fy - 16.0, 0.0, 100.0)
    out[:, :, 1] = 500.0 * (fx - fy)
    out[:, :, 2] = 200.0 * (fy - fz)
    return LabImage(out)


def lab_to_srgb(lab: LabImage) -> ImageBuffer:
    """Inverse CIELAB transform with per-channel clamping to [0, 255]."""
    L, a, b = lab.L, lab.a, lab.b
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0

    def f_inv(f: np.ndarray) -> np.ndarray:
        f3 = f ** 3
        return np.where(f3 > _LAB_EPS, f3, (116.0 * f - 16.0) / _LAB_KAPPA)

    xyz = np.stack([f_inv(fx), np.where(L > _LAB_KAPPA * _LAB_EPS,
                                        ((L + 16.0) / 116.0) ** 3,
                                        L / _LAB_KAPPA), f_inv(fz)], axis=-1)
    linear = (xyz * _WHITE) @ _XYZ_TO_RGB.T
    linear = np.clip(linear, 0.0, 1.0)
    c = np.where(linear <= 0.0031308, 12.92 * linear,
                 1.055 * linear ** (1.0 / 2.4) - 0.055)
    return ImageBuffer(np.clip(np.floor(c * 255.0 + 0.5), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def quantize_luminance(L: np.ndarray) -> np.ndarray:
    """Quantize L in [0, 100] to integer bins 0..CLAHE_BINS-1."""
    scale = (CLAHE_BINS - 1) / 100.0
    return np.clip(np.floor(L * scale + 0.5), 0, CLAHE_BINS - 1).astype(np.int64)


def clip_histogram(hist: np.ndarray, clip_limit: float, n_pixels: int) -> np.ndarray:
    """Clip bins at clip_limit x average height and redistribute the excess."""
    clip = max(1, int(clip_limit * n_pixels / CLAHE_BINS))
    clipped = np.minimum(hist, clip)
    excess = int(hist.sum() - clipped.sum())
    clipped += excess // CLAHE_BINS
    clipped[: excess % CLAHE_BINS] += 1
    return clipped


def compute_tile_luts(L: np.ndarray, tile_grid: tuple[int, int],
                      clip_limit: float) -> np.ndarray:
    """Per-tile transfer LUTs, shape (rows, cols, CLAHE_BINS), values 0..255.

    Tile boundaries are floor(k * extent / n): tiles cover the image exactly
    and differ in size by at most one pixel.
    """
    cols, rows = tile_grid
    h, w = L.shape
    if cols > w or rows > h:
        raise ValueError(f"tile grid {cols}x{rows} exceeds image {w}x{h}")
    bins = quantize_luminance(L)
    luts = np.empty((rows, cols, CLAHE_BINS), dtype=np.float64)
    for r in range(rows):
        y0, y1 = r * h // rows, (r + 1) * h // rows
        for c in range(cols):
            x0, x1 = c * w // cols, (c + 1) * w // cols
            tile = bins[y0:y1, x0:x1]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=CLAHE_BINS)
            hist = clip_histogram(hist, clip_limit, n)
            cdf = np.cumsum(hist)
            luts[r, c] = np.floor(cdf * (CLAHE_BINS - 1) / n + 0.5)
    return luts


def clahe_luminance(lab: LabImage, clip_limit: float,
                    tile_grid: tuple[int, int]) -> LabImage:
    """Contrast-limited adaptive histogram equalization on the L channel.

    Each pixel blends the transfer functions of its four surrounding tiles
    by bilinear interpolation on tile-center coordinates; border pixels reuse
    the edge tiles (replicated mappings). Chroma channels pass through
    untouched.
    """
    cols, rows = tile_grid
    h, w = lab.height, lab.width
    luts = compute_tile_luts(lab.L, tile_grid, clip_limit)
    bins = quantize_luminance(lab.L)

    # Continuous tile coordinates of each pixel center; tile j's center sits
    # at (j + 0.5) * extent / n.
    tx = (np.arange(w) + 0.5) * cols / w - 0.5
    ty = (np.arange(h) + 0.5) * rows / h - 0.5
    jx0 = np.floor(tx).astype(np.int64)
    jy0 = np.floor(ty).astype(np.int64)
    wx = tx - jx0
    wy = ty - jy0
    jx0c = np.clip(jx0, 0, cols - 1)
    jx1c = np.clip(jx0 + 1, 0, cols - 1)
    jy0c = np.clip(jy0, 0, rows - 1)
    jy1c = np.clip(jy0 + 1, 0, rows - 1)

    def lookup(ji: np.ndarray, jj: np.ndarray) -> np.ndarray:
        return luts[ji[:, None], jj[None, :], bins]

    top = lookup(jy0c, jx0c) * (1.0 - wx)[None, :] + lookup(jy0c, jx1c) * wx[None, :]
    bot = lookup(jy1c, jx0c) * (1.0 - wx)[None, :] + lookup(jy1c, jx1c) * wx[None, :]
    mixed = top * (1.0 - wy)[:, None] + bot * wy[:, None]

    out = lab.values.copy()
    out[:, :, 0] = mixed * (100.0 / (CLAHE_BINS - 1))
    return LabImage(out)


# ---------------------------------------------------------------------------
# Blur and sharpening
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 * sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable Gaussian blur with clamp-to-edge handling, per channel."""
    k = gaussian_kernel(sigma)
    acc = img.pixels.astype(np.float64)
    acc = correlate1d(acc, k, axis=0, mode="nearest")
    acc = correlate1d(acc, k, axis=1, mode="nearest")
    return ImageBuffer(np.clip(np.floor(acc + 0.5), 0, 255).astype(np.uint8))


def unsharp_mask(img: ImageBuffer, sigma: float, amount: float) -> ImageBuffer:
    """Sharpen: out = clamp(in + amount * (in - blur(in)))."""
    if amount < 0:
        raise ValueError("amount must be >= 0")
    blurred = gaussian_blur(img, sigma).pixels.astype(np.float64)
    src = img.pixels.astype(np.float64)
    out = src + amount * (src - blurred)
    return ImageBuffer(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def preprocess(img: ImageBuffer, params: EnhanceParams) -> ImageBuffer:
    """Full enhancement chain: CLAHE on luminance, then unsharp masking."""
    lab = srgb_to_lab(img)
    lab = clahe_luminance(lab, params.clahe_clip_limit, params.clahe_tile_grid)
    enhanced = lab_to_srgb(lab)
    return unsharp_mask(enhanced, params.unsharp_sigma, params.unsharp_amount)


# ---------------------------------------------------------------------------
# Raster I/O (PNG canonical, JPEG accepted on input)
# ---------------------------------------------------------------------------

def read_image(path: str | Path) -> ImageBuffer:
    """Load a PNG or JPEG file as an RGB buffer."""
    with Image.open(path) as im:
        return ImageBuffer(np.asarray(im.convert("RGB")))


def write_png(img: ImageBuffer, path: str | Path) -> None:
    Image.fromarray(img.pixels).save(path, format="PNG")


def encode_png(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> ImageBuffer:
    with Image.open(io.BytesIO(data)) as im:
        return ImageBuffer(np.asarray(im.convert("RGB")))
