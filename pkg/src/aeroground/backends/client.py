"""HTTP client for the model roles.

Calls are idempotent at the protocol level: every attempt of one logical
call carries the same x-request-id. Transport failures (connection errors,
timeouts, 5xx) are retried up to the endpoint's retry budget; 4xx responses
and malformed payloads are protocol violations and are not retried.
"""

from __future__ import annotations

import json
import logging
import uuid

import requests

from ..imaging import ImageBuffer
from . import protocol
from .protocol import (
    BackendEndpoint,
    SegmentRequest,
    SegmentResponse,
    ROLE_EDITOR,
    ROLE_REWRITER,
    SEGMENTER_ROLES,
)

logger = logging.getLogger(__name__)


class TransportError(Exception):
    """Endpoint unreachable, timed out, or kept failing after retries."""


class ProtocolError(Exception):
    """The backend answered, but outside the protocol contract."""


def _post(ep: BackendEndpoint, path: str, body: dict,
          task_id: str, request_id: str) -> dict:
    url = ep.base_url.rstrip("/") + path
    headers = {
        protocol.TASK_ID_HEADER: task_id,
        protocol.REQUEST_ID_HEADER: request_id,
    }
    last_error: Exception | None = None
    for attempt in range(ep.retries + 1):
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=ep.timeout)
        except requests.RequestException as exc:
            last_error = exc
            logger.debug("attempt %d to %s failed: %s", attempt + 1, url, exc)
            continue
        if resp.status_code >= 500:
            last_error = TransportError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            continue
        if resp.status_code >= 400:
            raise ProtocolError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"{url} returned non-JSON body") from exc
    raise TransportError(f"{url} failed after {ep.retries + 1} attempts: {last_error}")


def new_request_id() -> str:
    return uuid.uuid4().hex


def edit_image(ep: BackendEndpoint, image: ImageBuffer, instruction: str,
               task_id: str = "", request_id: str | None = None) -> ImageBuffer:
    """Ask the editor to paint the described object; returns the edited raster."""
    if ep.role != ROLE_EDITOR:
        raise ValueError(f"edit_image needs an editor endpoint, got {ep.role}")
    body = {"image_png_b64": protocol.image_to_b64(image), "instruction": instruction}
    payload = _post(ep, protocol.EDIT_PATH, body, task_id, request_id or new_request_id())
    try:
        edited = protocol.image_from_b64(payload["image_png_b64"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ProtocolError(f"malformed edit response: {exc}") from exc
    if (edited.width, edited.height) != (image.width, image.height):
        raise ProtocolError(
            f"edit returned {edited.width}x{edited.height}, "
            f"expected {image.width}x{image.height}")
    return edited


def segment(ep: BackendEndpoint, req: SegmentRequest,
            task_id: str = "", request_id: str | None = None) -> SegmentResponse:
    """Run one segmentation call; masks are validated against the request image."""
    if ep.role not in SEGMENTER_ROLES:
        raise ValueError(f"segment needs a segmenter endpoint, got {ep.role}")
    payload = _post(ep, protocol.SEGMENT_PATH, req.to_wire(), task_id,
                    request_id or new_request_id())
    try:
        resp = SegmentResponse.from_wire(payload)
    except (KeyError, ValueError, TypeError) as exc:
        raise ProtocolError(f"malformed segment response: {exc}") from exc
    for m in resp.masks:
        if (m.width, m.height) != (req.image.width, req.image.height):
            raise ProtocolError(
                f"mask {m.width}x{m.height} does not match request image "
                f"{req.image.width}x{req.image.height}")
    return resp


def try_rewrite(ep: BackendEndpoint, query: str, task_id: str = "",
                request_id: str | None = None) -> tuple[str, str | None]:
    """Rewrite a query, degrading to the original on any failure.

    Returns (query_to_use, failure_reason); failure_reason is None when the
    rewriter answered properly.
    """
    if ep.role != ROLE_REWRITER:
        raise ValueError(f"rewrite needs a rewriter endpoint, got {ep.role}")
    try:
        payload = _post(ep, protocol.REWRITE_PATH, {"query": query}, task_id,
                        request_id or new_request_id())
        rewritten = payload.get("query")
    except (TransportError, ProtocolError) as exc:
        logger.warning("rewrite failed (%s); using original query", exc)
        return query, type(exc).__name__
    if not isinstance(rewritten, str) or not rewritten:
        logger.warning("rewriter returned an empty or non-string query; using original")
        return query, "empty_rewrite"
    return rewritten, None


def rewrite_query(ep: BackendEndpoint, query: str,
                  task_id: str = "", request_id: str | None = None) -> str:
    """Best-effort query rewriting; degrades to the original query on failure."""
    return try_rewrite(ep, query, task_id, request_id)[0]


def health(base_url: str, timeout: float = 5.0) -> dict:
    """GET /v1/health; raises TransportError when unreachable or not ok."""
    url = base_url.rstrip("/") + protocol.HEALTH_PATH
    try:
        resp = requests.get(url, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"health check failed for {url}: {exc}") from exc
    if resp.status_code != 200:
        raise TransportError(f"health check for {url} returned {resp.status_code}")
    try:
        payload = resp.json()
    except json.JSONDecodeError as exc:
        raise TransportError(f"health check for {url} returned non-JSON") from exc
    if payload.get("status") != "ok":
        raise TransportError(f"health check for {url} reported {payload!r}")
    return payload
