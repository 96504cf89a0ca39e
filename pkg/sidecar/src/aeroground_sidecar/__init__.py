"""Serve real grounding models behind the aeroground wire protocol.

The sidecar exposes /v1/edit, /v1/segment, /v1/rewrite and /v1/health
bit-compatibly with the pipeline's backend client, including the
x-request-id idempotency contract. Role assignments map each role to a
model adapter; roles whose model fails to load are simply left out of
/v1/health.
"""

__version__ = "0.1.0"
