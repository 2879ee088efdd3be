"""gsbridge: serve editor-protocol job directories with a real image editor.

    gsbridge --root /path/to/jobs --watch            # diffusion backend
    gsbridge --root /path/to/jobs --backend identity # protocol stub
    gsbridge --self-test                             # conformance check
"""

from __future__ import annotations

import argparse
import sys

from .backends import BridgeConfig
from .selftest import run_self_test
from .watcher import watch_and_edit


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsbridge", description=__doc__)
    parser.add_argument("--root", help="job root directory to serve")
    parser.add_argument("--backend", choices=("identity", "diffusion"),
                        default="diffusion")
    parser.add_argument("--watch", action="store_true",
                        help="keep polling for new jobs (default: one scan)")
    parser.add_argument("--poll", type=float, default=0.5)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--model-id")
    parser.add_argument("--controlnet-id")
    parser.add_argument("--conditioning-scale", type=float)
    parser.add_argument("--image-guidance", type=float)
    parser.add_argument("--text-guidance", type=float)
    parser.add_argument("--num-steps", type=int)
    parser.add_argument("--max-resolution", type=int)
    parser.add_argument("--self-test", action="store_true",
                        help="run the identity-stub conformance suite and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.self_test:
        return 0 if run_self_test() else 1
    if not args.root:
        print("error: --root is required (or use --self-test)", file=sys.stderr)
        return 1

    config = BridgeConfig(job_root=args.root, backend=args.backend,
                          device=args.device, poll_interval_s=args.poll)
    for flag, attr in (("model_id", "model_id"), ("controlnet_id", "controlnet_id"),
                       ("conditioning_scale", "conditioning_scale"),
                       ("image_guidance", "image_guidance"),
                       ("text_guidance", "text_guidance"),
                       ("num_steps", "num_steps"),
                       ("max_resolution", "max_resolution")):
        value = getattr(args, flag)
        if value is not None:
            setattr(config, attr, value)

    if args.watch:
        print(f"serving jobs under {args.root} with {args.backend} backend "
              "(Ctrl-C to stop)")
        try:
            watch_and_edit(config, stop_condition=lambda: False)
        except KeyboardInterrupt:
            return 0
        return 0
    served = watch_and_edit(config)
    print(f"served {served} job(s)")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
