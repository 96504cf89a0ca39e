"""Wire-protocol constants and raster codecs.

The sidecar talks the same HTTP+JSON protocol as the pipeline's backend
client: base64 PNG rasters (RGB images, single-channel {0,255} masks),
half-open integer boxes, x-task-id / x-request-id headers, and
{"error": {"code", "message"}} error bodies.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

ROLE_EDITOR = "editor"
ROLE_SEGMENTER_SMALL = "segmenter_small"
ROLE_SEGMENTER_LARGE = "segmenter_large"
ROLE_REWRITER = "rewriter"
ALL_ROLES = (ROLE_EDITOR, ROLE_SEGMENTER_SMALL, ROLE_SEGMENTER_LARGE, ROLE_REWRITER)

EDIT_PATH = "/v1/edit"
SEGMENT_PATH = "/v1/segment"
REWRITE_PATH = "/v1/rewrite"
HEALTH_PATH = "/v1/health"

TASK_ID_HEADER = "x-task-id"
REQUEST_ID_HEADER = "x-request-id"


def decode_image_b64(data: str) -> np.ndarray:
    """Base64 PNG -> (H, W, 3) uint8 RGB array."""
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"))


def encode_image_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def encode_mask_b64(bits: np.ndarray) -> str:
    arr = np.where(bits, 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_b64(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("L")) > 127


def error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}
