"""``inference-sidecar serve``: watch a request directory and answer batches."""

from __future__ import annotations

import argparse
import logging
import sys

from .backends import DEFAULT_DIM, ClipSamBackend, StubBackend
from .server import SidecarServer


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inference-sidecar")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="consume request manifests until interrupted")
    p.add_argument("--request-dir", required=True)
    p.add_argument("--response-dir", required=True)
    p.add_argument("--backend", choices=["stub", "clip-sam"], default="stub")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM,
                   help="embedding dimensionality (stub backend)")
    p.add_argument("--clip-model", default="openai/clip-vit-large-patch14-336")
    p.add_argument("--sam-checkpoint")
    p.add_argument("--device", default="cpu")
    p.add_argument("--poll-interval", type=float, default=0.05)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend == "stub":
        backend = StubBackend(dim=args.dim)
    else:
        backend = ClipSamBackend(clip_model=args.clip_model,
                                 sam_checkpoint=args.sam_checkpoint,
                                 device=args.device)
    server = SidecarServer(args.request_dir, args.response_dir, backend)
    try:
        server.serve(poll_interval=args.poll_interval)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
