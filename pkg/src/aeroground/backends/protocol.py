"""Wire protocol shared by the model client, the mock server and any
conforming sidecar.

All endpoints exchange UTF-8 JSON bodies. Rasters travel as base64 PNG:
RGB for images, single-channel {0, 255} for masks. Box coordinates use the
half-open integer convention of the geometry module.

  POST /v1/edit     {"image_png_b64", "instruction"}        -> {"image_png_b64"}
  POST /v1/segment  {"image_png_b64", "prompt_mode", ...}   -> {"masks": [...]}
  POST /v1/rewrite  {"query"}                               -> {"query"}
  GET  /v1/health                                           -> {"status", "roles"}

Errors carry {"error": {"code", "message"}} with a 4xx/5xx status.
Headers: x-task-id (opaque), x-request-id (idempotency key).
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..geometry import BBox, BinaryMask
from ..imaging import ImageBuffer, decode_png, encode_png

ROLE_EDITOR = "editor"
ROLE_SEGMENTER_SMALL = "segmenter_small"
ROLE_SEGMENTER_LARGE = "segmenter_large"
ROLE_REWRITER = "rewriter"
ALL_ROLES = (ROLE_EDITOR, ROLE_SEGMENTER_SMALL, ROLE_SEGMENTER_LARGE, ROLE_REWRITER)
SEGMENTER_ROLES = (ROLE_SEGMENTER_SMALL, ROLE_SEGMENTER_LARGE)

EDIT_PATH = "/v1/edit"
SEGMENT_PATH = "/v1/segment"
REWRITE_PATH = "/v1/rewrite"
HEALTH_PATH = "/v1/health"

TASK_ID_HEADER = "x-task-id"
REQUEST_ID_HEADER = "x-request-id"


@dataclass(frozen=True)
class BackendEndpoint:
    """Where one model role is served, plus the client's retry policy."""

    role: str
    base_url: str
    timeout: float = 30.0
    retries: int = 1

    def __post_init__(self) -> None:
        if self.role not in ALL_ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass(frozen=True)
class SegmentRequest:
    """One segmentation call: text-prompted or box-prompted."""

    image: ImageBuffer
    prompt_mode: str  # "text" | "boxes"
    text: str | None = None
    boxes: tuple[BBox, ...] | None = None

    def __post_init__(self) -> None:
        if self.prompt_mode == "text":
            if not self.text or self.boxes is not None:
                raise ValueError("text mode requires text and no boxes")
        elif self.prompt_mode == "boxes":
            if not self.boxes or self.text is not None:
                raise ValueError("boxes mode requires boxes and no text")
        else:
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")

    def to_wire(self) -> dict:
        body: dict = {
            "image_png_b64": image_to_b64(self.image),
            "prompt_mode": self.prompt_mode,
        }
        if self.prompt_mode == "text":
            body["text"] = self.text
        else:
            body["boxes"] = [list(b.as_tuple()) for b in self.boxes]
        return body


@dataclass(frozen=True)
class SegmentResponse:
    """Zero or more scored masks; empty means the segmenter found nothing."""

    masks: tuple[BinaryMask, ...] = field(default_factory=tuple)

    @staticmethod
    def from_wire(payload: dict) -> "SegmentResponse":
        masks = []
        for entry in payload["masks"]:
            masks.append(mask_from_b64(entry["mask_png_b64"], float(entry["score"])))
        return SegmentResponse(masks=tuple(masks))

    def to_wire(self) -> dict:
        return {"masks": [{"mask_png_b64": mask_to_b64(m), "score": m.score}
                          for m in self.masks]}


def image_to_b64(img: ImageBuffer) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def image_from_b64(data: str) -> ImageBuffer:
    return decode_png(base64.b64decode(data))


def mask_to_b64(mask: BinaryMask) -> str:
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def mask_from_b64(data: str, score: float) -> BinaryMask:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr > 127, score=score)


def error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}
