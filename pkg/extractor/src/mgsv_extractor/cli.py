"""CLI: `mgsv-extract extract --kind video|music --in ... --out ...` and
`mgsv-extract manifest --log ... --out ...`."""

from __future__ import annotations

import argparse
import sys

from .featfile import ExtractError
from .manifest import build_manifest
from .pipeline import ExtractionJob, run


def cmd_extract(args) -> int:
    job = ExtractionJob(media_path=args.infile, kind=args.kind,
                        output_path=args.out, encoder_weights=args.weights)
    rows = run(job)
    print(f"{args.kind}: {rows} tokens -> {args.out}")
    return 0


def cmd_manifest(args) -> int:
    result = build_manifest(args.log, args.out, split=args.split)
    for video_id, reason in result.rejected:
        print(f"rejected {video_id}: {reason}", file=sys.stderr)
    print(f"manifest: {result.accepted} entries -> {args.out}"
          f" ({len(result.rejected)} rejected)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgsv-extract")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="media file -> token file")
    ex.add_argument("--kind", choices=("video", "music"), required=True)
    ex.add_argument("--in", dest="infile", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--weights", help="local pretrained-encoder directory")
    ex.set_defaults(func=cmd_extract)

    mf = sub.add_parser("manifest", help="editing log -> dataset manifest")
    mf.add_argument("--log", required=True)
    mf.add_argument("--out", required=True)
    mf.add_argument("--split", default="train")
    mf.set_defaults(func=cmd_manifest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
