"""Protocol smoke test: one tiny synthetic image through every served role.

Checks field names, mask dimensions and score ranges, never model quality.
Each failure names the endpoint and field that broke the contract.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field

import numpy as np
import requests

from . import wire


@dataclass
class SmokeReport:
    base_url: str
    roles: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _synthetic_image(width: int = 48, height: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    gray = ((xx * 5 + yy * 3) % 256).astype(np.uint8)
    img = np.stack([gray, gray, gray], axis=-1)
    img[8:24, 16:32] = (90, 140, 90)  # one block for segmenters to find
    return img


def _post(base_url: str, path: str, body: dict, timeout: float):
    return requests.post(
        base_url.rstrip("/") + path, json=body, timeout=timeout,
        headers={wire.TASK_ID_HEADER: "smoke",
                 wire.REQUEST_ID_HEADER: uuid.uuid4().hex})


def smoke_test(base_url: str, timeout: float = 60.0) -> SmokeReport:
    """Exercise every advertised role once; returns the failure report."""
    report = SmokeReport(base_url=base_url)
    img = _synthetic_image()
    h, w = img.shape[:2]

    try:
        resp = requests.get(base_url.rstrip("/") + wire.HEALTH_PATH, timeout=timeout)
        payload = resp.json()
    except (requests.RequestException, json.JSONDecodeError) as exc:
        report.failures.append(f"/v1/health: {exc}")
        return report
    if resp.status_code != 200 or payload.get("status") != "ok":
        report.failures.append(f"/v1/health: status {resp.status_code} "
                               f"body {payload!r}")
        return report
    report.roles = list(payload.get("roles", []))

    if wire.ROLE_EDITOR in report.roles:
        try:
            resp = _post(base_url, wire.EDIT_PATH,
                         {"image_png_b64": wire.encode_image_b64(img),
                          "instruction": "highlight the dark block"}, timeout)
            if resp.status_code != 200:
                report.failures.append(f"/v1/edit: status {resp.status_code}")
            else:
                body = resp.json()
                if "image_png_b64" not in body:
                    report.failures.append("/v1/edit: missing field image_png_b64")
                else:
                    edited = wire.decode_image_b64(body["image_png_b64"])
                    if edited.shape[:2] != (h, w):
                        report.failures.append(
                            f"/v1/edit: dimensions {edited.shape[1]}x{edited.shape[0]}"
                            f", expected {w}x{h}")
        except (requests.RequestException, json.JSONDecodeError, ValueError) as exc:
            report.failures.append(f"/v1/edit: {exc}")

    if {wire.ROLE_SEGMENTER_SMALL, wire.ROLE_SEGMENTER_LARGE} & set(report.roles):
        for mode, extra in (("boxes", {"boxes": [[16, 8, 32, 24]]}),
                            ("text", {"text": "the dark block"})):
            try:
                resp = _post(base_url, wire.SEGMENT_PATH,
                             {"image_png_b64": wire.encode_image_b64(img),
                              "prompt_mode": mode, **extra}, timeout)
                if resp.status_code != 200:
                    report.failures.append(f"/v1/segment[{mode}]: status "
                                           f"{resp.status_code}")
                    continue
                body = resp.json()
                masks = body.get("masks")
                if not isinstance(masks, list):
                    report.failures.append(f"/v1/segment[{mode}]: missing masks list")
                    continue
                for i, entry in enumerate(masks):
                    if "mask_png_b64" not in entry or "score" not in entry:
                        report.failures.append(
                            f"/v1/segment[{mode}]: mask {i} missing fields")
                        continue
                    if not 0.0 <= float(entry["score"]) <= 1.0:
                        report.failures.append(
                            f"/v1/segment[{mode}]: mask {i} score "
                            f"{entry['score']} outside [0, 1]")
                    bits = wire.decode_mask_b64(entry["mask_png_b64"])
                    if bits.shape != (h, w):
                        report.failures.append(
                            f"/v1/segment[{mode}]: mask {i} is "
                            f"{bits.shape[1]}x{bits.shape[0]}, expected {w}x{h}")
            except (requests.RequestException, json.JSONDecodeError, ValueError) as exc:
                report.failures.append(f"/v1/segment[{mode}]: {exc}")

    if wire.ROLE_REWRITER in report.roles:
        try:
            resp = _post(base_url, wire.REWRITE_PATH,
                         {"query": "Find the dark block. Answer in one word."},
                         timeout)
            if resp.status_code != 200:
                report.failures.append(f"/v1/rewrite: status {resp.status_code}")
            else:
                q = resp.json().get("query")
                if not isinstance(q, str) or not q:
                    report.failures.append(
                        "/v1/rewrite: query must be a non-empty string")
        except (requests.RequestException, json.JSONDecodeError) as exc:
            report.failures.append(f"/v1/rewrite: {exc}")

    return report
