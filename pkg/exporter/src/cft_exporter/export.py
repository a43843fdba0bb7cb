"""Export orchestration: checkpoint in, CFT1 + manifest (+ golden fixture) out.

The manifest records everything a reader needs to audit the conversion:
the complete source-name -> container-name mapping, the inferred config,
which tensors were synthesized rather than converted, and the hashes that
make idempotence checkable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .container import REUSE_NAMES, TargetConfig, write_container
from .errors import ExportError
from .images import load_standardized
from .mapping import MappedCheckpoint, infer_heads, map_checkpoint
from .reference import reference_logits

MANIFEST_SCHEMA = "cft-export-manifest-v1"
GOLDEN_SCHEMA = "cft-golden-v1"


@dataclass(frozen=True)
class ExportResult:
    out_path: Path
    manifest_path: Path
    golden_path: Path | None
    config: TargetConfig
    manifest: dict


def load_checkpoint(path: str | Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ExportError(f"cannot read checkpoint {path}: {exc}") from exc


def synthesize_reuse(embed_dim: int, seed: int) -> dict[str, np.ndarray]:
    """Stand-in warm-start tensors for checkpoints that predate the two-stage
    scheme, following the engine's documented synthetic-init rules: one PCG64
    stream, weights normal / sqrt(fan_in), gains one, biases zero."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    d = embed_dim
    out: dict[str, np.ndarray] = {}
    for name in REUSE_NAMES:
        shape = {
            "reuse.norm.gain": (d,), "reuse.norm.bias": (d,),
            "reuse.mlp_in.weight": (d, d), "reuse.mlp_in.bias": (d,),
            "reuse.mlp_out.weight": (d, d), "reuse.mlp_out.bias": (d,),
        }[name]
        if name.endswith(".weight"):
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = arr.astype(np.float32)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def export_checkpoint(
    source_path: str | Path,
    out_path: str | Path,
    *,
    heads: int | None = None,
    ema_start: int | None = None,
    alpha: float = 0.5,
    beta: float = 0.99,
    reuse_seed: int = 0,
    golden_image: str | Path | None = None,
    golden_out: str | Path | None = None,
    manifest_out: str | Path | None = None,
) -> ExportResult:
    source_path = Path(source_path)
    out_path = Path(out_path)
    mapped: MappedCheckpoint = map_checkpoint(load_checkpoint(source_path))

    cfg = TargetConfig(
        coarse_grid=mapped.fine_grid // 2,
        patch_px=mapped.patch_px,
        embed_dim=mapped.embed_dim,
        depth=mapped.depth,
        heads=heads if heads is not None else infer_heads(mapped.embed_dim),
        num_classes=mapped.num_classes,
        alpha=alpha,
        beta=beta,
        ema_start=ema_start if ema_start is not None else min(4, mapped.depth),
        mlp_ratio=mapped.mlp_ratio,
    )

    tensors = dict(mapped.tensors)
    synthesized = sorted(set(REUSE_NAMES) - set(tensors))
    tensors.update({n: v for n, v in synthesize_reuse(cfg.embed_dim,
                                                      reuse_seed).items()
                    if n in synthesized})
    write_container(tensors, cfg, out_path)

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "source": {
            "file": source_path.name,
            "sha256": _sha256(source_path),
            "flavor": mapped.flavor,
            "pos_convention": mapped.pos_convention,
        },
        "config": {
            "coarse_grid": cfg.coarse_grid, "fine_grid": cfg.fine_grid,
            "patch_px": cfg.patch_px, "embed_dim": cfg.embed_dim,
            "depth": cfg.depth, "heads": cfg.heads,
            "num_classes": cfg.num_classes, "ema_start": cfg.ema_start,
            "mlp_ratio": cfg.mlp_ratio, "alpha": cfg.alpha, "beta": cfg.beta,
            "heads_inferred": heads is None,
        },
        "mapping": mapped.mapping,
        "synthesized": {
            "tensors": synthesized,
            "seed": reuse_seed if synthesized else None,
        },
        "notes": mapped.notes,
        "cft1_sha256": _sha256(out_path),
    }
    manifest_path = (Path(manifest_out) if manifest_out
                     else out_path.with_suffix(out_path.suffix + ".manifest.json"))
    _dump_json(manifest, manifest_path)

    golden_path = None
    if golden_image is not None:
        golden_image = Path(golden_image)
        image = load_standardized(golden_image)
        logits = reference_logits(tensors, cfg, image)
        golden_path = (Path(golden_out) if golden_out
                       else out_path.with_suffix(out_path.suffix + ".golden.json"))
        _dump_json({
            "schema": GOLDEN_SCHEMA,
            "image": golden_image.name,
            "image_sha256": _sha256(golden_image),
            "activation": "gelu-tanh",
            "precision": "float64",
            "run": "full fine grid, alpha=1, warm start off, never exit",
            "logits": [float(v) for v in logits],
        }, golden_path)

    return ExportResult(out_path, manifest_path, golden_path, cfg, manifest)
