"""Command line: serve a model behind the wire contract, or self-test it."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass


@dataclass(frozen=True)
class ServerConfig:
    model: str = "stub"
    checkpoint: str | None = None
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8087
    box_threshold: float = 0.25
    text_threshold: float = 0.25

    def __post_init__(self):
        for name in ("box_threshold", "text_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def serve(config: ServerConfig) -> None:
    import uvicorn

    from .app import create_app
    from .models import load_model

    model = load_model(config.model, config.checkpoint, config.device)
    app = create_app(
        model,
        default_box_threshold=config.box_threshold,
        default_text_threshold=config.text_threshold,
    )
    uvicorn.run(app, host=config.host, port=config.port)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="detector-server", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the HTTP server")
    p_serve.add_argument("--model", default="stub", help="stub | grounding-dino")
    p_serve.add_argument("--checkpoint", default=None)
    p_serve.add_argument("--device", default="cpu")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8087)
    p_serve.add_argument("--box-threshold", type=float, default=0.25)
    p_serve.add_argument("--text-threshold", type=float, default=0.25)

    p_selftest = sub.add_parser("selftest", help="replay golden requests against the stub")
    p_selftest.add_argument("--golden-dir", default=None)

    args = parser.parse_args(argv)
    if args.command == "selftest":
        from .selftest import contract_selftest

        ok, problems = contract_selftest(args.golden_dir)
        for problem in problems:
            print(f"FAIL: {problem}", file=sys.stderr)
        print("contract selftest: " + ("PASS" if ok else "FAIL"))
        return 0 if ok else 1

    try:
        config = ServerConfig(
            model=args.model,
            checkpoint=args.checkpoint,
            device=args.device,
            host=args.host,
            port=args.port,
            box_threshold=args.box_threshold,
            text_threshold=args.text_threshold,
        )
        serve(config)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())
