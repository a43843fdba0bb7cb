"""Command-line surface. Subcommands: generate, infer, sweep, report, cost,
selftest. All outputs are deterministic given identical inputs and flags;
JSON and CSV payloads carry a schema version string.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ModelConfig
from .controller import InferenceResult, run_inference
from .cost import CostReport, cost_report, single_pass_flops, stage_flops
from .errors import CftError, InvalidValueError
from .imageio import DEFAULT_MEAN, DEFAULT_STD, load_image
from .selftest import CHECK_NAMES, run_selftest
from .sweep import (
    collect_image_stats,
    parse_eta_spec,
    parse_sweep_csv,
    read_labels,
    rows_to_csv,
    sweep_rows,
)
from .weights_io import SYNTHETIC_SOURCE, generate_synthetic, load_weights, save_weights

JSON_SCHEMA = "cft-trace-v1"
COST_SCHEMA = "cft-cost-v1"
IMAGE_SUFFIXES = (".ppm", ".cfti")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    p.add_argument("--coarse-grid", type=int, default=defaults.coarse_grid)
    p.add_argument("--patch-px", type=int, default=defaults.patch_px)
    p.add_argument("--embed-dim", type=int, default=defaults.embed_dim)
    p.add_argument("--depth", type=int, default=defaults.depth)
    p.add_argument("--heads", type=int, default=defaults.heads)
    p.add_argument("--classes", type=int, default=defaults.num_classes)
    p.add_argument("--alpha", type=float, default=defaults.alpha,
                   help="fraction of coarse patches to re-split")
    p.add_argument("--beta", type=float, default=defaults.beta,
                   help="attention moving-average momentum")
    p.add_argument("--ema-start", type=int, default=defaults.ema_start,
                   help="first encoder (1-based) that feeds the moving average")
    p.add_argument("--mlp-ratio", type=int, default=defaults.mlp_ratio)


def _add_image_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mean", type=_triple, default=DEFAULT_MEAN,
                   help="per-channel standardization mean, e.g. 0.485,0.456,0.406")
    p.add_argument("--std", type=_triple, default=DEFAULT_STD,
                   help="per-channel standardization std")
    p.add_argument("--no-standardize", action="store_true",
                   help="feed raw [0,1] intensities to the model")


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values: {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cft",
        description="Adaptive coarse-to-fine vision-transformer inference engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write deterministic synthetic weights")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="single-image adaptive inference, JSON trace")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--eta", type=float, default=0.5,
                   help="early-exit confidence threshold; 1.0 always refines")
    p.add_argument("--alpha", type=float, default=None,
                   help="override the split ratio stored with the weights")
    p.add_argument("--json", default=None, help="also write the trace to this file")
    p.add_argument("--emit-attention", action="store_true",
                   help="include the final attention average over patches")
    p.add_argument("--emit-logits", action="store_true",
                   help="include raw per-stage logits")
    p.add_argument("--no-reuse", action="store_true",
                   help="disable the coarse-to-fine warm start")
    _add_image_flags(p)

    p = sub.add_parser("sweep", help="threshold sweep over an image directory")
    p.add_argument("--weights", required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--etas", default="0:1:0.05",
                   help="start:stop:step (inclusive) or comma list")
    p.add_argument("--csv", default=None, help="write rows here instead of stdout")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--labels", default=None,
                   help="optional 'filename,class' file enabling per-stage accuracy")
    p.add_argument("--no-reuse", action="store_true")

    p = sub.add_parser("report", help="render sweep figures and echo the table")
    p.add_argument("--csv", required=True, help="sweep CSV to visualize")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="sweep")

    p = sub.add_parser("cost", help="analytic or measured cost breakdown")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", default=None,
                   help="measure an actual run instead of the analytic model")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--no-reuse", action="store_true")
    p.add_argument("--figure", default=None, help="render a breakdown chart here")
    _add_image_flags(p)

    p = sub.add_parser("selftest", help="run the built-in oracle suite")
    p.add_argument("--break", dest="break_check", choices=CHECK_NAMES, default=None,
                   help="deliberately fault one check to prove detection works")

    return parser


def _cmd_generate(args) -> int:
    cfg = ModelConfig(
        coarse_grid=args.coarse_grid, patch_px=args.patch_px,
        embed_dim=args.embed_dim, depth=args.depth, heads=args.heads,
        num_classes=args.classes, alpha=args.alpha, beta=args.beta,
        ema_start=args.ema_start, mlp_ratio=args.mlp_ratio,
    )
    weights = generate_synthetic(cfg, args.seed)
    save_weights(weights, cfg, args.out, source=SYNTHETIC_SOURCE)
    size = Path(args.out).stat().st_size
    print(f"wrote {args.out} ({size} bytes, seed {args.seed})")
    return 0


def _stage_dict(outcome, emit_logits: bool) -> dict:
    entry = {
        "predicted_class": outcome.predicted_class,
        "confidence": float(outcome.confidence),
        "sequence_length": outcome.sequence_length,
        "flops": {
            "total": outcome.counter.mul_adds,
            "sections": {k: int(v) for k, v in sorted(outcome.counter.sections.items())},
        },
    }
    if emit_logits:
        entry["logits"] = [float(v) for v in outcome.logits.array]
    return entry


def trace_dict(result: InferenceResult, eta: float, alpha: float,
               emit_attention: bool = False, emit_logits: bool = False) -> dict:
    final = result.final
    trace = {
        "schema": JSON_SCHEMA,
        "eta": float(eta),
        "alpha": float(alpha),
        "stage": "coarse" if result.exited_early else "fine",
        "predicted_class": final.predicted_class,
        "confidence": float(final.confidence),
        "selected_patches": (list(result.selection)
                             if result.selection is not None else None),
        "coarse": _stage_dict(result.coarse, emit_logits),
        "fine": (_stage_dict(result.fine, emit_logits)
                 if result.fine is not None else None),
        "flops_total": result.total_mul_adds,
    }
    if emit_attention:
        vec = final.global_attention
        trace["global_attention"] = ([float(v) for v in vec.array]
                                     if vec is not None else None)
    return trace


def _cmd_infer(args) -> int:
    weights, cfg = load_weights(args.weights)
    if args.alpha is not None:
        cfg = dataclasses.replace(cfg, alpha=args.alpha)
    image = load_image(args.image, mean=args.mean, std=args.std,
                       standardize=not args.no_standardize)
    result = run_inference(image, cfg, weights, eta=args.eta,
                           use_reuse=not args.no_reuse)
    trace = trace_dict(result, args.eta, cfg.alpha,
                       emit_attention=args.emit_attention,
                       emit_logits=args.emit_logits)
    payload = json.dumps(trace, sort_keys=True, separators=(",", ":")) + "\n"
    sys.stdout.write(payload)
    if args.json:
        Path(args.json).write_text(payload)
    return 0


def _image_files(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise InvalidValueError(f"not a directory: {directory}")
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InvalidValueError(
            f"no {' / '.join(IMAGE_SUFFIXES)} files in {directory}"
        )
    return files


def _cmd_sweep(args) -> int:
    weights, cfg = load_weights(args.weights)
    etas = parse_eta_spec(args.etas)
    files = _image_files(args.dir)
    labels = read_labels(args.labels) if args.labels else None
    stats = collect_image_stats(files, cfg, weights, workers=args.workers,
                                use_reuse=not args.no_reuse)
    rows = sweep_rows(stats, etas, cfg, labels)
    text = rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
        print(f"wrote {args.csv} ({len(rows)} rows, {len(stats)} images)")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_report(args) -> int:
    from .reporting import render_sweep_figures

    text = Path(args.csv).read_text()
    rows = parse_sweep_csv(text)
    paths = render_sweep_figures(rows, args.out_dir, prefix=args.prefix)
    sys.stdout.write(rows_to_csv(rows))
    for p in paths:
        print(f"figure: {p}", file=sys.stderr)
    return 0


def _analytic_report(cfg: ModelConfig, reuse_hidden: int) -> CostReport:
    from .controller import fine_token_count, split_count
    from .cost import embed_flops, head_flops, reuse_flops

    n_f = fine_token_count(cfg.n_coarse, cfg.alpha)
    coarse_embed_head = embed_flops(cfg.n_coarse, cfg) + head_flops(cfg)
    fine_embed_head = embed_flops(n_f, cfg) + head_flops(cfg)
    reuse = reuse_flops(split_count(cfg.n_coarse, cfg.alpha), cfg, reuse_hidden)
    coarse_enc = single_pass_flops(cfg, cfg.n_coarse) - coarse_embed_head
    fine_enc = single_pass_flops(cfg, n_f) - fine_embed_head
    return CostReport(
        coarse_flops=coarse_enc,
        fine_flops=fine_enc,
        reuse_flops=reuse,
        embed_head_flops=coarse_embed_head + fine_embed_head,
        total=coarse_enc + fine_enc + reuse + coarse_embed_head + fine_embed_head,
    )


def _cmd_cost(args) -> int:
    weights, cfg = load_weights(args.weights)
    lines = [f"# schema={COST_SCHEMA}", "part,mul_adds"]
    if args.image:
        image = load_image(args.image, mean=args.mean, std=args.std,
                           standardize=not args.no_standardize)
        result = run_inference(image, cfg, weights, eta=args.eta,
                               use_reuse=not args.no_reuse)
        report = cost_report(result)
        lines.append("mode,measured")
    else:
        report = _analytic_report(cfg, weights.reuse.hidden_dim)
        lines.append("mode,analytic")
    lines += [
        f"coarse_encoders,{report.coarse_flops}",
        f"fine_encoders,{report.fine_flops}",
        f"feature_reuse,{report.reuse_flops}",
        f"embed_head,{report.embed_head_flops}",
        f"total,{report.total}",
        f"coarse_stage_model,{stage_flops(cfg, 'coarse')}",
        f"fine_stage_model,{stage_flops(cfg, 'fine', reuse_hidden=weights.reuse.hidden_dim)}",
        f"full_fine_single_pass,{single_pass_flops(cfg, cfg.n_fine_full)}",
    ]
    sys.stdout.write("\n".join(lines) + "\n")
    if args.figure:
        from .reporting import render_cost_figure

        path = render_cost_figure(report, args.figure)
        print(f"figure: {path}", file=sys.stderr)
    return 0


def _cmd_selftest(args) -> int:
    results, elapsed = run_selftest(args.break_check)
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        print(f"[{mark}] {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {elapsed:.2f}s")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "infer": _cmd_infer,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "cost": _cmd_cost,
    "selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
