"""Protocol conformance checks runnable against any backend server.

The suite exercises the four endpoints, the x-request-id idempotency
contract, and the error-body shape, and returns a list of human-readable
failures (empty means fully conformant). It checks wire behavior only,
never model quality, so it applies equally to the deterministic mock and
to a real model server.
"""

from __future__ import annotations

import json
import uuid

import numpy as np
import requests

from . import __version__
from .backends import protocol
from .geometry import BBox
from .imaging import ImageBuffer


def _tiny_image(width: int = 32, height: int = 24) -> ImageBuffer:
    rng = np.random.default_rng(7)
    v = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    return ImageBuffer(np.stack([v, v, v], axis=-1))


def _post(base_url: str, path: str, body: dict, timeout: float,
          request_id: str | None = None, task_id: str = "conformance"):
    headers = {protocol.TASK_ID_HEADER: task_id}
    if request_id is not None:
        headers[protocol.REQUEST_ID_HEADER] = request_id
    return requests.post(base_url.rstrip("/") + path, json=body,
                         headers=headers, timeout=timeout)


def run_conformance(base_url: str, timeout: float = 30.0) -> list[str]:
    """Run every conformance check; returns the list of failures."""
    failures: list[str] = []
    img = _tiny_image()

    # --- health -----------------------------------------------------------
    roles: list[str] = []
    try:
        resp = requests.get(base_url.rstrip("/") + protocol.HEALTH_PATH,
                            timeout=timeout)
        if resp.status_code != 200:
            failures.append(f"/v1/health: status {resp.status_code}, expected 200")
        else:
            payload = resp.json()
            if payload.get("status") != "ok":
                failures.append(f"/v1/health: status field {payload.get('status')!r}")
            roles = payload.get("roles", [])
            if not isinstance(roles, list) or not roles:
                failures.append("/v1/health: roles must be a non-empty list")
                roles = []
            for r in roles:
                if r not in protocol.ALL_ROLES:
                    failures.append(f"/v1/health: unknown role {r!r}")
    except (requests.RequestException, json.JSONDecodeError) as exc:
        failures.append(f"/v1/health: {exc}")
        return failures

    # --- /v1/edit ----------------------------------------------------------
    if protocol.ROLE_EDITOR in roles:
        try:
            body = {"image_png_b64": protocol.image_to_b64(img),
                    "instruction": "Draw a red bounding box around: the tank."}
            rid = uuid.uuid4().hex
            resp = _post(base_url, protocol.EDIT_PATH, body, timeout, rid)
            if resp.status_code != 200:
                failures.append(f"/v1/edit: status {resp.status_code}")
            else:
                payload = resp.json()
                if "image_png_b64" not in payload:
                    failures.append("/v1/edit: missing field image_png_b64")
                else:
                    edited = protocol.image_from_b64(payload["image_png_b64"])
                    if (edited.width, edited.height) != (img.width, img.height):
                        failures.append(
                            f"/v1/edit: returned {edited.width}x{edited.height}, "
                            f"expected {img.width}x{img.height}")
                replay = _post(base_url, protocol.EDIT_PATH, body, timeout, rid)
                if replay.content != resp.content:
                    failures.append("/v1/edit: replay with same x-request-id "
                                    "returned a different body")
        except (requests.RequestException, json.JSONDecodeError, ValueError) as exc:
            failures.append(f"/v1/edit: {exc}")

    # --- /v1/segment (both prompt modes) ------------------------------------
    if set(protocol.SEGMENTER_ROLES) & set(roles):
        box = BBox(4, 4, 20, 16)
        for mode, extra in (("boxes", {"boxes": [list(box.as_tuple())]}),
                            ("text", {"text": "the tank"})):
            try:
                body = {"image_png_b64": protocol.image_to_b64(img),
                        "prompt_mode": mode, **extra}
                rid = uuid.uuid4().hex
                resp = _post(base_url, protocol.SEGMENT_PATH, body, timeout, rid)
                if resp.status_code != 200:
                    failures.append(f"/v1/segment[{mode}]: status {resp.status_code}")
                    continue
                payload = resp.json()
                if "masks" not in payload or not isinstance(payload["masks"], list):
                    failures.append(f"/v1/segment[{mode}]: missing masks list")
                    continue
                for i, entry in enumerate(payload["masks"]):
                    if set(entry.keys()) < {"mask_png_b64", "score"}:
                        failures.append(
                            f"/v1/segment[{mode}]: mask {i} missing fields")
                        continue
                    score = entry["score"]
                    if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
                        failures.append(
                            f"/v1/segment[{mode}]: mask {i} score {score!r} "
                            "outside [0, 1]")
                    mask = protocol.mask_from_b64(entry["mask_png_b64"],
                                                  min(max(float(score), 0.0), 1.0))
                    if (mask.width, mask.height) != (img.width, img.height):
                        failures.append(
                            f"/v1/segment[{mode}]: mask {i} is "
                            f"{mask.width}x{mask.height}, expected "
                            f"{img.width}x{img.height}")
                replay = _post(base_url, protocol.SEGMENT_PATH, body, timeout, rid)
                if replay.content != resp.content:
                    failures.append(f"/v1/segment[{mode}]: replay with same "
                                    "x-request-id returned a different body")
            except (requests.RequestException, json.JSONDecodeError, ValueError) as exc:
                failures.append(f"/v1/segment[{mode}]: {exc}")

    # --- /v1/rewrite ---------------------------------------------------------
    if protocol.ROLE_REWRITER in roles:
        try:
            body = {"query": "Find the ship. Answer in one word."}
            rid = uuid.uuid4().hex
            resp = _post(base_url, protocol.REWRITE_PATH, body, timeout, rid)
            if resp.status_code != 200:
                failures.append(f"/v1/rewrite: status {resp.status_code}")
            else:
                payload = resp.json()
                q = payload.get("query")
                if not isinstance(q, str) or not q:
                    failures.append("/v1/rewrite: query must be a non-empty string")
                replay = _post(base_url, protocol.REWRITE_PATH, body, timeout, rid)
                if replay.content != resp.content:
                    failures.append("/v1/rewrite: replay with same x-request-id "
                                    "returned a different body")
        except (requests.RequestException, json.JSONDecodeError) as exc:
            failures.append(f"/v1/rewrite: {exc}")

    # --- error body shape ------------------------------------------------------
    if set(protocol.SEGMENTER_ROLES) & set(roles):
        try:
            resp = _post(base_url, protocol.SEGMENT_PATH,
                         {"prompt_mode": "boxes"}, timeout)
            if not 400 <= resp.status_code < 600:
                failures.append(
                    f"segment with missing image: status {resp.status_code}, "
                    "expected an error")
            else:
                err = resp.json().get("error")
                if not isinstance(err, dict) or not {"code", "message"} <= set(err):
                    failures.append("error body must be "
                                    '{"error": {"code", "message"}}')
        except (requests.RequestException, json.JSONDecodeError) as exc:
            failures.append(f"error-body check: {exc}")

    return failures


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="aeroground-conformance",
        description="Check a backend server against the wire protocol")
    parser.add_argument("base_url")
    parser.add_argument("--timeout", type=float, default=30.0)
    args = parser.parse_args(argv)
    failures = run_conformance(args.base_url, timeout=args.timeout)
    for f in failures:
        print(f"FAIL {f}")
    if not failures:
        print(f"conformant (suite {__version__})")
    return 1 if failures else 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
