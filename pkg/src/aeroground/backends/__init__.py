"""Model-role wire protocol, HTTP client, and the deterministic mock server."""

from .protocol import (
    ALL_ROLES,
    ROLE_EDITOR,
    ROLE_REWRITER,
    ROLE_SEGMENTER_LARGE,
    ROLE_SEGMENTER_SMALL,
    SEGMENTER_ROLES,
    BackendEndpoint,
    SegmentRequest,
    SegmentResponse,
)
from .client import (
    ProtocolError,
    TransportError,
    edit_image,
    health,
    rewrite_query,
    segment,
    try_rewrite,
)
from .mock import MockBackend, MockConfig, spawn_mock_backend

__all__ = [
    "ALL_ROLES",
    "ROLE_EDITOR",
    "ROLE_REWRITER",
    "ROLE_SEGMENTER_LARGE",
    "ROLE_SEGMENTER_SMALL",
    "SEGMENTER_ROLES",
    "BackendEndpoint",
    "SegmentRequest",
    "SegmentResponse",
    "ProtocolError",
    "TransportError",
    "edit_image",
    "health",
    "rewrite_query",
    "segment",
    "try_rewrite",
    "MockBackend",
    "MockConfig",
    "spawn_mock_backend",
]
