"""Bridge CLI: serve the guidance service or check golden conformance."""

from __future__ import annotations

import argparse
import sys

from .service import GuidanceService, ServiceConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="d4d-bridge")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("serve", help="run the guidance service")
    q.add_argument("--host", default="127.0.0.1")
    q.add_argument("--port", type=int, default=8941)
    q.add_argument("--mock", action="store_true", help="identity denoiser in every slot")
    q.add_argument(
        "--slot",
        action="append",
        default=[],
        metavar="KIND=MODEL",
        help="bind a slot, e.g. video=toyprior (repeatable)",
    )
    q.add_argument("--max-concurrency", type=int, default=2)

    q = sub.add_parser("conformance", help="verify the committed golden fixtures")
    q.add_argument("--golden", default=None, help="fixture directory")

    args = parser.parse_args(argv)
    if args.command == "serve":
        if args.mock:
            config = ServiceConfig.mock(port=args.port)
            config.host = args.host
            config.max_concurrency = args.max_concurrency
        else:
            slots = dict(item.split("=", 1) for item in args.slot)
            if not slots:
                print("error: pass --mock or at least one --slot KIND=MODEL", file=sys.stderr)
                return 2
            config = ServiceConfig(
                host=args.host,
                port=args.port,
                max_concurrency=args.max_concurrency,
                slots=slots,
            )
        GuidanceService(config).serve_forever()
        return 0

    from .conformance import run_conformance

    failures = run_conformance(args.golden)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
