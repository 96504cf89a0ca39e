"""HTTP server exposing loaded model adapters behind the wire protocol.

Health only advertises roles whose model actually loaded; requests for an
unloaded role get a 404 error body. Each role runs at most
max_concurrent_per_role requests at a time, with excess requests queued
first-in first-out. Responses are cached per x-request-id so a retried
request replays byte-identically.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import OrderedDict, deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import __version__
from .adapters import AdapterLoadError, build_adapter
from .config import SidecarConfig
from . import wire
from .wire import error_body

logger = logging.getLogger(__name__)


class FifoSlots:
    """Counting semaphore with strict FIFO hand-off."""

    def __init__(self, slots: int):
        self._free = slots
        self._lock = threading.Lock()
        self._waiters: deque[threading.Event] = deque()

    def acquire(self) -> None:
        with self._lock:
            if self._free > 0 and not self._waiters:
                self._free -= 1
                return
            ticket = threading.Event()
            self._waiters.append(ticket)
        ticket.wait()

    def release(self) -> None:
        with self._lock:
            if self._waiters:
                self._waiters.popleft().set()
            else:
                self._free += 1

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


def load_role_adapters(config: SidecarConfig) -> dict[str, object]:
    """Load every configured role; failures are logged and the role skipped."""
    adapters: dict[str, object] = {}
    for role, assignment in config.roles.items():
        try:
            adapters[role] = build_adapter(role, assignment.model, assignment.device)
            logger.info("loaded %s for role %s on %s", assignment.model, role,
                        assignment.device)
        except AdapterLoadError as exc:
            logger.warning("role %s unavailable: %s", role, exc)
    return adapters


class _SidecarHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_ref: "SidecarServer"

    def log_message(self, fmt, *args):
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
        if self.path != wire.HEALTH_PATH:
            self._send(404, error_body("not_found", f"no route {self.path}"))
            return
        self._send(200, self.server_ref.health_payload())

    def do_POST(self):
        srv = self.server_ref
        role = srv.role_for_path(self.path)
        if role is None:
            self._send(404, error_body("not_found", f"no route {self.path}"))
            return
        if role not in srv.adapters:
            self._send(404, error_body("role_not_served",
                                       f"no model loaded for {self.path}"))
            return

        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        request_id = self.headers.get(wire.REQUEST_ID_HEADER, "")
        task_id = self.headers.get(wire.TASK_ID_HEADER, "")
        logger.info("sidecar %s task=%s request=%s", self.path, task_id or "-",
                    request_id or "-")

        if request_id:
            hit = srv.cache_get(request_id)
            if hit is not None:
                self._send(hit[0], raw=hit[1])
                return

        try:
            body = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            self._send(400, error_body("bad_request", f"invalid JSON: {exc}"))
            return

        with srv.slots[role]:
            try:
                status, payload = srv.handle(role, self.path, body)
            except (KeyError, ValueError, TypeError) as exc:
                status, payload = 400, error_body("bad_request", str(exc))
            except Exception as exc:  # inference failure -> 500 per contract
                logger.exception("inference failure on %s", self.path)
                status, payload = 500, error_body("inference_error", str(exc))

        data = self._send(status, payload)
        if request_id:
            srv.cache_put(request_id, status, data)


class SidecarServer:
    """A running sidecar; use serve() to construct one."""

    _CACHE_MAX = 1024

    def __init__(self, config: SidecarConfig, host: str, port: int):
        self.config = config
        self.adapters = load_role_adapters(config)
        self.slots = {role: FifoSlots(config.max_concurrent_per_role)
                      for role in config.roles}
        self._cache: "OrderedDict[str, tuple[int, bytes]]" = OrderedDict()
        self._cache_lock = threading.Lock()

        handler = type("BoundSidecarHandler", (_SidecarHandler,),
                       {"server_ref": self})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self.base_url = f"http://{host}:{self._httpd.server_address[1]}"
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="sidecar", daemon=True)
        self._thread.start()

    # -- request plumbing ---------------------------------------------------

    def role_for_path(self, path: str) -> str | None:
        if path == wire.EDIT_PATH:
            return wire.ROLE_EDITOR
        if path == wire.SEGMENT_PATH:
            # both segmenter roles share the path; serve with whichever loaded
            if wire.ROLE_SEGMENTER_SMALL in self.adapters:
                return wire.ROLE_SEGMENTER_SMALL
            return wire.ROLE_SEGMENTER_LARGE
        if path == wire.REWRITE_PATH:
            return wire.ROLE_REWRITER
        return None

    def cache_get(self, request_id: str) -> tuple[int, bytes] | None:
        with self._cache_lock:
            return self._cache.get(request_id)

    def cache_put(self, request_id: str, status: int, data: bytes) -> None:
        with self._cache_lock:
            self._cache[request_id] = (status, data)
            while len(self._cache) > self._CACHE_MAX:
                self._cache.popitem(last=False)

    def health_payload(self) -> dict:
        return {
            "status": "ok",
            "roles": sorted(self.adapters.keys()),
            "metadata": {
                "server": f"aeroground-sidecar {__version__}",
                "models": {role: self.config.roles[role].model
                           for role in sorted(self.adapters.keys())},
                "decoding": self.config.decoding,
            },
        }

    def _check_size(self, arr: np.ndarray) -> None:
        if arr.shape[0] * arr.shape[1] > self.config.max_image_pixels:
            raise ValueError(
                f"image has {arr.shape[0] * arr.shape[1]} pixels, "
                f"limit is {self.config.max_image_pixels}")

    def handle(self, role: str, path: str, body: dict) -> tuple[int, dict]:
        if path == wire.EDIT_PATH:
            image = wire.decode_image_b64(body["image_png_b64"])
            self._check_size(image)
            edited = self.adapters[role].edit(image, str(body["instruction"]))
            return 200, {"image_png_b64": wire.encode_image_b64(edited)}

        if path == wire.SEGMENT_PATH:
            image = wire.decode_image_b64(body["image_png_b64"])
            self._check_size(image)
            mode = body["prompt_mode"]
            if mode == "boxes":
                results = self.adapters[role].segment(image, "boxes",
                                                      boxes=body["boxes"])
            elif mode == "text":
                results = self.adapters[role].segment(image, "text",
                                                      text=str(body["text"]))
            else:
                raise ValueError(f"unknown prompt_mode {mode!r}")
            return 200, {"masks": [
                {"mask_png_b64": wire.encode_mask_b64(bits),
                 "score": float(score)}
                for bits, score in results
            ]}

        query = str(body["query"])
        rewritten = self.adapters[role].rewrite(query)
        if not rewritten:
            rewritten = query  # non-empty output contract
        return 200, {"query": rewritten}

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "SidecarServer":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(config: SidecarConfig, host: str = "127.0.0.1",
          port: int = 8600) -> SidecarServer:
    """Start serving the configured roles; raises OSError on a taken port."""
    return SidecarServer(config, host, port)
