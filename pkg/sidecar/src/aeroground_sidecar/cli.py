"""Sidecar command line: serve models, or smoke-test a running server."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import default_config, load_config
from .server import serve
from .smoke import smoke_test


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="aeroground-sidecar",
        description="Serve grounding models behind the wire protocol")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="load models and serve until interrupted")
    p.add_argument("--config", help="SidecarConfig JSON (defaults to CPU adapters)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8600)

    p = sub.add_parser("smoke", help="run the protocol smoke test")
    p.add_argument("base_url")
    p.add_argument("--timeout", type=float, default=60.0)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.command == "serve":
        config = load_config(args.config) if args.config else default_config()
        try:
            server = serve(config, host=args.host, port=args.port)
        except OSError as exc:
            print(f"error: cannot bind {args.host}:{args.port}: {exc}",
                  file=sys.stderr)
            return 1
        print(f"sidecar serving {sorted(server.adapters)} at {server.base_url}",
              file=sys.stderr)
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            server.shutdown()
        return 0

    report = smoke_test(args.base_url, timeout=args.timeout)
    for failure in report.failures:
        print(f"FAIL {failure}")
    if report.ok:
        print(f"smoke ok: roles {report.roles}")
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
