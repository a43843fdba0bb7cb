"""CFT1 container writer, implemented from docs/cft1-format.md.

This is deliberately independent of the engine package: the exporter only
promises bytes that conform to the documented layout, and the engine's own
loader is the arbiter of whether they do.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ExportError

MAGIC = b"CFT1"
FORMAT_VERSION = 1
SOURCE_TAG = "exported"

_HEADER = struct.Struct("<4sI16s9I2f")

_ENCODER_FIELDS = (
    "norm1.gain", "norm1.bias", "qkv.weight", "qkv.bias",
    "attn_out.weight", "attn_out.bias", "norm2.gain", "norm2.bias",
    "ffn_in.weight", "ffn_in.bias", "ffn_out.weight", "ffn_out.bias",
)
REUSE_NAMES = (
    "reuse.norm.gain", "reuse.norm.bias", "reuse.mlp_in.weight",
    "reuse.mlp_in.bias", "reuse.mlp_out.weight", "reuse.mlp_out.bias",
)
_HEAD_FIELDS = ("norm.gain", "norm.bias", "linear.weight", "linear.bias")


@dataclass(frozen=True)
class TargetConfig:
    """The config block of the container being written."""

    coarse_grid: int
    patch_px: int
    embed_dim: int
    depth: int
    heads: int
    num_classes: int
    alpha: float
    beta: float
    ema_start: int
    mlp_ratio: int

    @property
    def fine_grid(self) -> int:
        return 2 * self.coarse_grid

    @property
    def image_px(self) -> int:
        return self.fine_grid * self.patch_px

    def validate(self) -> None:
        problems = []
        for field in ("coarse_grid", "patch_px", "embed_dim", "depth",
                      "heads", "mlp_ratio"):
            if getattr(self, field) < 1:
                problems.append(f"{field} must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.embed_dim % max(self.heads, 1):
            problems.append(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not 1 <= self.ema_start <= self.depth:
            problems.append(
                f"ema_start {self.ema_start} outside 1..{self.depth}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            problems.append(f"beta {self.beta} outside [0, 1]")
        if problems:
            raise ExportError("bad target config: " + "; ".join(problems))


def canonical_entries(cfg: TargetConfig,
                      reuse_hidden: int) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Required (name, shape) pairs in container order."""
    d, r = cfg.embed_dim, cfg.mlp_ratio
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("patch_proj.weight", (3 * cfg.patch_px ** 2, d)),
        ("patch_proj.bias", (d,)),
        ("class_token", (d,)),
        ("pos_table", (1 + cfg.fine_grid ** 2, d)),
    ]
    enc = {
        "norm1.gain": (d,), "norm1.bias": (d,),
        "qkv.weight": (d, 3 * d), "qkv.bias": (3 * d,),
        "attn_out.weight": (d, d), "attn_out.bias": (d,),
        "norm2.gain": (d,), "norm2.bias": (d,),
        "ffn_in.weight": (d, r * d), "ffn_in.bias": (r * d,),
        "ffn_out.weight": (r * d, d), "ffn_out.bias": (d,),
    }
    for k in range(cfg.depth):
        entries.extend((f"encoder.{k}.{f}", enc[f]) for f in _ENCODER_FIELDS)
    reuse = {
        "reuse.norm.gain": (d,), "reuse.norm.bias": (d,),
        "reuse.mlp_in.weight": (d, reuse_hidden),
        "reuse.mlp_in.bias": (reuse_hidden,),
        "reuse.mlp_out.weight": (reuse_hidden, d),
        "reuse.mlp_out.bias": (d,),
    }
    entries.extend((n, reuse[n]) for n in REUSE_NAMES)
    head = {
        "norm.gain": (d,), "norm.bias": (d,),
        "linear.weight": (d, cfg.num_classes),
        "linear.bias": (cfg.num_classes,),
    }
    entries.extend((f"head.{f}", head[f]) for f in _HEAD_FIELDS)
    return tuple(entries)


def write_container(tensors: dict[str, np.ndarray], cfg: TargetConfig,
                    path: str | Path) -> None:
    """Write one container; refuses missing, surplus, or misshapen tensors."""
    cfg.validate()
    hidden = tensors.get("reuse.mlp_in.weight")
    if hidden is None or hidden.ndim != 2:
        raise ExportError("reuse.mlp_in.weight missing or not a matrix")
    entries = canonical_entries(cfg, reuse_hidden=hidden.shape[1])

    required = [name for name, _ in entries]
    surplus = sorted(set(tensors) - set(required))
    missing = sorted(set(required) - set(tensors))
    if surplus or missing:
        raise ExportError(
            f"tensor set mismatch: missing {missing or 'none'}, "
            f"surplus {surplus or 'none'}"
        )
    bad_shapes = [
        f"{name}: {tuple(tensors[name].shape)} != {shape}"
        for name, shape in entries if tuple(tensors[name].shape) != shape
    ]
    if bad_shapes:
        raise ExportError("shape mismatches: " + "; ".join(bad_shapes))

    directory = bytearray()
    dir_size = sum(2 + len(n.encode()) + 4 + 4 * len(s) + 8 for n, s in entries)
    offset = _HEADER.size + 4 + dir_size
    for name, shape in entries:
        raw = name.encode()
        directory += struct.pack(f"<H{len(raw)}sI{len(shape)}IQ",
                                 len(raw), raw, len(shape), *shape, offset)
        offset += 4 * int(np.prod(shape))

    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, SOURCE_TAG.encode().ljust(16, b"\0"),
        cfg.coarse_grid, cfg.fine_grid, cfg.patch_px, cfg.embed_dim,
        cfg.depth, cfg.heads, cfg.num_classes, cfg.ema_start, cfg.mlp_ratio,
        cfg.alpha, cfg.beta,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(entries)))
        fh.write(directory)
        for name, _ in entries:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
