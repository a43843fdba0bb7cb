"""cft-export: convert a ViT checkpoint into a CFT1 weight container."""

from __future__ import annotations

import argparse
import sys

from .errors import ExportError
from .export import export_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cft-export",
        description="Convert a timm- or transformers-style ViT checkpoint "
                    "into a CFT1 container, with an auditable manifest and "
                    "an optional golden-logits fixture.",
    )
    parser.add_argument("source", help="checkpoint file (torch.save format)")
    parser.add_argument("out", help="CFT1 container to write")
    parser.add_argument("--heads", type=int, default=None,
                        help="attention head count (default: embed_dim / 64, "
                             "the DeiT family convention)")
    parser.add_argument("--ema-start", type=int, default=None,
                        help="first encoder folded into the attention "
                             "average (default: min(4, depth))")
    parser.add_argument("--alpha", type=float, default=0.5,
                        help="default split fraction stored in the header")
    parser.add_argument("--beta", type=float, default=0.99,
                        help="attention-average momentum stored in the header")
    parser.add_argument("--reuse-seed", type=int, default=0,
                        help="seed for synthesized warm-start tensors")
    parser.add_argument("--golden", default=None, metavar="IMAGE",
                        help="also compute a golden-logits fixture for this "
                             "PPM/CFTI image")
    parser.add_argument("--golden-out", default=None,
                        help="fixture path (default: <out>.golden.json)")
    parser.add_argument("--manifest-out", default=None,
                        help="manifest path (default: <out>.manifest.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = export_checkpoint(
            args.source, args.out,
            heads=args.heads, ema_start=args.ema_start,
            alpha=args.alpha, beta=args.beta, reuse_seed=args.reuse_seed,
            golden_image=args.golden, golden_out=args.golden_out,
            manifest_out=args.manifest_out,
        )
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    cfg = result.config
    print(f"wrote {result.out_path} ({result.out_path.stat().st_size} bytes, "
          f"D={cfg.embed_dim} depth={cfg.depth} heads={cfg.heads} "
          f"grid={cfg.fine_grid}x{cfg.fine_grid})")
    print(f"manifest: {result.manifest_path}")
    if result.golden_path is not None:
        print(f"golden: {result.golden_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
