"""Command-line entry: vaps-export."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .encoders import DEFAULT_ENCODER, REGISTRY
from .exporter import ExportError, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vaps-export",
        description="Run a frozen patch-token encoder over a labeled image "
                    "folder and emit VAPS-FEAT plus a labels JSON sidecar.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("images_dir", help="folder the split CSVs reference")
    p.add_argument("--splits", nargs="+", required=True,
                   help="CSV files with columns image,attribute,object,split")
    p.add_argument("--vocab", required=True,
                   help="JSON file declaring attribute and object name lists")
    p.add_argument("--out", required=True, help="output .feat path")
    p.add_argument("--pool", choices=("cls", "mean"), default="mean",
                   help="pooled-vector rule (default: mean of emitted tokens)")
    p.add_argument("--tokens", type=int, default=8,
                   help="token rows per record, uniform patch subsample")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--encoder", default=DEFAULT_ENCODER,
                   choices=sorted(REGISTRY))
    p.add_argument("--dataset-name", default=None,
                   help="manifest label; defaults to the folder name")
    return p


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        manifest = export(args.images_dir, args.splits, args.vocab, args.out,
                          pool=args.pool, tokens=args.tokens,
                          image_size=args.image_size,
                          encoder_name=args.encoder,
                          dataset_name=args.dataset_name)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {manifest.image_count} records "
          f"(d={manifest.d}, n_tokens={manifest.n_tokens}, "
          f"skipped {len(manifest.skipped)}) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
