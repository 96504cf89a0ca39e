"""Deterministic protocol-compatible stand-in for the model servers.

Every response is a pure function of (seed, task id, request body), never
of arrival order or wall clock, so concurrent runs against the same mock
reproduce bit-identically. Behaviors model the failure modes the pipeline
must survive:

  oracle       editor paints the truth box exactly; segmenters honor prompts
  jitter       editor paints the truth box shifted by a seeded offset
  hallucinate  editor paints a box disjoint from truth (spurious highlight)
  fail         editor/rewriter return 503; segmenters return zero masks
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..geometry import BBox, BinaryMask
from ..imaging import ImageBuffer
from . import protocol
from .protocol import BackendEndpoint, SegmentResponse, error_body

logger = logging.getLogger(__name__)

BEHAVIORS = ("oracle", "jitter", "hallucinate", "fail")

_RED = np.array([255, 0, 0], dtype=np.uint8)
_STROKE = 3


@dataclass(frozen=True)
class MockConfig:
    behavior: str = "oracle"
    jitter_px: int = 4
    shrink: float = 1.0
    fail_rate: float = 0.0
    seed: int = 0
    truth_table: dict[str, BBox] = field(default_factory=dict)
    # optional "strip-instructions" rewriter: suffixes removed from queries
    rewrite_strip_suffixes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if not 0.0 < self.shrink <= 1.0:
            raise ValueError("shrink must be in (0, 1]")
        if not 0.0 <= self.fail_rate <= 1.0:
            raise ValueError("fail_rate must be in [0, 1]")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be >= 0")


def _hash_u64(*parts) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _unit(*parts) -> float:
    return _hash_u64(*parts) / 2.0 ** 64


def _randint(lo: int, hi: int, *parts) -> int:
    """Deterministic integer in [lo, hi]."""
    if hi <= lo:
        return lo
    return lo + _hash_u64(*parts) % (hi - lo + 1)


def draw_red_outline(img: ImageBuffer, box: BBox, stroke: int = _STROKE) -> ImageBuffer:
    """Paint a red rectangle outline with the stroke inside the box, so the
    strokes' tight bounding box is the box itself."""
    out = img.pixels.copy()
    s = min(stroke, box.width, box.height)
    out[box.y_min:box.y_min + s, box.x_min:box.x_max] = _RED
    out[box.y_max - s:box.y_max, box.x_min:box.x_max] = _RED
    out[box.y_min:box.y_max, box.x_min:box.x_min + s] = _RED
    out[box.y_min:box.y_max, box.x_max - s:box.x_max] = _RED
    return ImageBuffer(out)


def _clamp_shift(box: BBox, dx: int, dy: int, w: int, h: int) -> BBox:
    dx = max(-box.x_min, min(dx, w - box.x_max))
    dy = max(-box.y_min, min(dy, h - box.y_max))
    return BBox(box.x_min + dx, box.y_min + dy, box.x_max + dx, box.y_max + dy)


def _disjoint_box(truth: BBox, w: int, h: int, seed: int, task_id: str) -> BBox | None:
    """A plausible-size box fully inside the largest free strip beside truth."""
    strips = {
        "left": truth.x_min,
        "right": w - truth.x_max,
        "top": truth.y_min,
        "bottom": h - truth.y_max,
    }
    side, extent = max(strips.items(), key=lambda kv: kv[1])
    if extent < 2:
        return None
    if side in ("left", "right"):
        bw = min(max(truth.width, 8), extent)
        bh = min(max(truth.height, 8), h)
        x_lo = 0 if side == "left" else truth.x_max
        x_hi = (truth.x_min if side == "left" else w) - bw
        x0 = _randint(x_lo, x_hi, seed, "halx", task_id)
        y0 = _randint(0, h - bh, seed, "haly", task_id)
    else:
        bw = min(max(truth.width, 8), w)
        bh = min(max(truth.height, 8), extent)
        x0 = _randint(0, w - bw, seed, "halx", task_id)
        y_lo = 0 if side == "top" else truth.y_max
        y_hi = (truth.y_min if side == "top" else h) - bh
        y0 = _randint(y_lo, y_hi, seed, "haly", task_id)
    return BBox(x0, y0, x0 + bw, y0 + bh)


def shrink_box(box: BBox, shrink: float) -> BBox:
    """Centered shrink with integer floor; shrink=1.0 returns the box."""
    bw = max(1, int(box.width * shrink))
    bh = max(1, int(box.height * shrink))
    x0 = box.x_min + (box.width - bw) // 2
    y0 = box.y_min + (box.height - bh) // 2
    return BBox(x0, y0, x0 + bw, y0 + bh)


class _MockLogic:
    """Pure request -> response mapping; shared by every handler thread."""

    def __init__(self, cfg: MockConfig, roles: frozenset[str]):
        self.cfg = cfg
        self.roles = roles

    def _gated_fail(self, task_id: str, path: str) -> bool:
        if self.cfg.behavior == "fail":
            return True
        if self.cfg.fail_rate <= 0.0:
            return False
        return _unit(self.cfg.seed, "failgate", task_id, path) < self.cfg.fail_rate

    def edit(self, body: dict, task_id: str) -> tuple[int, dict]:
        if self._gated_fail(task_id, protocol.EDIT_PATH):
            return 503, error_body("unavailable", "editor is down (mock fail behavior)")
        img = protocol.image_from_b64(body["image_png_b64"])
        truth = self.cfg.truth_table.get(task_id)
        box: BBox | None = None
        if self.cfg.behavior in ("oracle", "jitter") and truth is not None:
            box = truth
            if self.cfg.behavior == "jitter" and self.cfg.jitter_px > 0:
                dx = _randint(-self.cfg.jitter_px, self.cfg.jitter_px,
                              self.cfg.seed, "jx", task_id)
                dy = _randint(-self.cfg.jitter_px, self.cfg.jitter_px,
                              self.cfg.seed, "jy", task_id)
                box = _clamp_shift(truth, dx, dy, img.width, img.height)
        elif self.cfg.behavior == "hallucinate" and truth is not None:
            box = _disjoint_box(truth, img.width, img.height,
                                self.cfg.seed, task_id)
        if box is not None:
            img = draw_red_outline(img, box)
        return 200, {"image_png_b64": protocol.image_to_b64(img)}

    def segment(self, body: dict, task_id: str) -> tuple[int, dict]:
        if self._gated_fail(task_id, protocol.SEGMENT_PATH):
            return 200, SegmentResponse().to_wire()
        img = protocol.image_from_b64(body["image_png_b64"])
        score = 0.6 if self.cfg.behavior == "hallucinate" else 0.9
        masks: list[BinaryMask] = []
        if body["prompt_mode"] == "boxes":
            # one mask per prompted box, shrunk toward its center; shrink
            # applies here only so it acts once along the pipeline's path
            for raw in body["boxes"]:
                box = shrink_box(BBox.from_tuple(raw), self.cfg.shrink)
                bits = np.zeros((img.height, img.width), dtype=bool)
                bits[max(box.y_min, 0):box.y_max, max(box.x_min, 0):box.x_max] = True
                masks.append(BinaryMask(bits, score=score))
        else:
            # text mode: the whole request image is "the object" (the caller
            # sends object-tight crops)
            bits = np.ones((img.height, img.width), dtype=bool)
            masks.append(BinaryMask(bits, score=score))
        return 200, SegmentResponse(tuple(masks)).to_wire()

    def rewrite(self, body: dict, task_id: str) -> tuple[int, dict]:
        if self._gated_fail(task_id, protocol.REWRITE_PATH):
            return 503, error_body("unavailable", "rewriter is down (mock fail behavior)")
        query = body["query"]
        out = query
        for suffix in self.cfg.rewrite_strip_suffixes:
            if out.endswith(suffix):
                out = out[: -len(suffix)].rstrip()
        return 200, {"query": out if out else query}

    def health(self) -> tuple[int, dict]:
        return 200, {"status": "ok", "roles": sorted(self.roles)}


class _MockHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    logic: _MockLogic
    cache: "OrderedDict[tuple[str, str], tuple[int, bytes]]"
    cache_lock: threading.Lock
    _CACHE_MAX = 2048

    _ROLE_GATE = {
        protocol.EDIT_PATH: {protocol.ROLE_EDITOR},
        protocol.SEGMENT_PATH: set(protocol.SEGMENTER_ROLES),
        protocol.REWRITE_PATH: {protocol.ROLE_REWRITER},
    }

    def log_message(self, fmt, *args):  # route through logging, not stderr
        logger.debug(fmt, *args)

    def _send(self, status: int, payload: dict | None = None,
              raw: bytes | None = None) -> bytes:
        data = raw if raw is not None else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)
        return data

    def do_GET(self):
        if self.path != protocol.HEALTH_PATH:
            self._send(404, error_body("not_found", f"no route {self.path}"))
            return
        status, payload = self.logic.health()
        self._send(status, payload)

    def do_POST(self):
        if self.path not in self._ROLE_GATE:
            self._send(404, error_body("not_found", f"no route {self.path}"))
            return
        if not (self._ROLE_GATE[self.path] & self.logic.roles):
            self._send(404, error_body("role_not_served",
                                       f"this mock does not serve {self.path}"))
            return
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        task_id = self.headers.get(protocol.TASK_ID_HEADER, "")
        request_id = self.headers.get(protocol.REQUEST_ID_HEADER, "")
        logger.info("mock %s task=%s request=%s", self.path, task_id or "-",
                    request_id or "-")

        cache_key = None
        if request_id:
            body_hash = hashlib.sha256(raw).hexdigest()
            cache_key = (request_id, body_hash)
            with self.cache_lock:
                hit = self.cache.get(cache_key)
            if hit is not None:
                self._send(hit[0], raw=hit[1])
                return

        try:
            body = json.loads(raw.decode("utf-8"))
            if self.path == protocol.EDIT_PATH:
                status, payload = self.logic.edit(body, task_id)
            elif self.path == protocol.SEGMENT_PATH:
                status, payload = self.logic.segment(body, task_id)
            else:
                status, payload = self.logic.rewrite(body, task_id)
        except (KeyError, ValueError, TypeError) as exc:
            status, payload = 400, error_body("bad_request", str(exc))

        data = self._send(status, payload)
        if cache_key is not None:
            with self.cache_lock:
                self.cache[cache_key] = (status, data)
                while len(self.cache) > self._CACHE_MAX:
                    self.cache.popitem(last=False)


class MockBackend:
    """A running mock server; shut it down when done."""

    def __init__(self, cfg: MockConfig, roles: frozenset[str],
                 host: str, port: int):
        handler = type("BoundMockHandler", (_MockHandler,), {
            "logic": _MockLogic(cfg, roles),
            "cache": OrderedDict(),
            "cache_lock": threading.Lock(),
        })
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self.roles = roles
        self.base_url = f"http://{host}:{self._server.server_address[1]}"
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="mock-backend", daemon=True)
        self._thread.start()

    def endpoint(self, role: str, timeout: float = 10.0, retries: int = 1) -> BackendEndpoint:
        if role not in self.roles:
            raise ValueError(f"mock does not serve role {role!r}")
        return BackendEndpoint(role=role, base_url=self.base_url,
                               timeout=timeout, retries=retries)

    def endpoints(self, timeout: float = 10.0, retries: int = 1) -> dict[str, BackendEndpoint]:
        return {role: self.endpoint(role, timeout, retries) for role in sorted(self.roles)}

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "MockBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def spawn_mock_backend(cfg: MockConfig, roles=protocol.ALL_ROLES,
                       host: str = "127.0.0.1", port: int = 0) -> MockBackend:
    """Start an in-process mock server; port 0 picks a free port.

    Raises OSError when the requested port cannot be bound.
    """
    return MockBackend(cfg, frozenset(roles), host, port)
