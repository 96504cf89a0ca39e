"""Wire-protocol conformance, runnable against the mock or any other server.

Point AEROGROUND_CONFORMANCE_URL at a running server (for example a real
model sidecar) to run the identical suite against it; without the variable
a deterministic mock is spawned in-process.
"""

from __future__ import annotations

import os

import pytest

from aeroground.backends.mock import MockConfig, spawn_mock_backend
from aeroground.conformance import run_conformance
from aeroground.geometry import BBox

EXTERNAL_URL = os.environ.get("AEROGROUND_CONFORMANCE_URL")


@pytest.fixture(scope="module")
def conformance_url():
    if EXTERNAL_URL:
        yield EXTERNAL_URL
        return
    cfg = MockConfig(behavior="oracle", seed=0,
                     truth_table={"conformance": BBox(4, 4, 20, 16)})
    with spawn_mock_backend(cfg) as backend:
        yield backend.base_url


def test_server_is_fully_conformant(conformance_url):
    failures = run_conformance(conformance_url)
    assert failures == [], "\n".join(failures)


def test_each_behavior_stays_conformant():
    if EXTERNAL_URL:
        pytest.skip("external server under test")
    for behavior in ("oracle", "jitter", "hallucinate"):
        cfg = MockConfig(behavior=behavior, seed=3,
                         truth_table={"conformance": BBox(4, 4, 20, 16)})
        with spawn_mock_backend(cfg) as backend:
            failures = run_conformance(backend.base_url)
            assert failures == [], f"{behavior}: " + "\n".join(failures)
