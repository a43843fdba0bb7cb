"""Name mapping from common ViT checkpoint layouts to the CFT1 tensor set.

Two source flavors are recognized: the original timm-style DeiT layout
(fused qkv, "blocks.N" naming) and the transformers-style layout (separate
q/k/v, "encoder.layer.N" naming, optional "vit."/"deit." prefix). Both
reduce to the same canonical tensors; orientation fixes (PyTorch stores
linear weights [out, in], the container wants [fan_in, fan_out]) happen
here so the rest of the exporter never thinks about layout again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ExportError

# DeiT family convention (Ti/S/B all use 64-wide heads). A state dict's
# shapes cannot recover the head count, so this is the default inference;
# callers can override.
HEAD_WIDTH_CONVENTION = 64

_DISTILLATION_MARKERS = ("dist_token", "head_dist", "distillation_token",
                         "cls_classifier", "distillation_classifier")

# source suffix -> (canonical suffix, transform), per encoder block
_TIMM_BLOCK = {
    "norm1.weight": ("norm1.gain", "copy"),
    "norm1.bias": ("norm1.bias", "copy"),
    "attn.qkv.weight": ("qkv.weight", "transpose"),
    "attn.qkv.bias": ("qkv.bias", "copy"),
    "attn.proj.weight": ("attn_out.weight", "transpose"),
    "attn.proj.bias": ("attn_out.bias", "copy"),
    "norm2.weight": ("norm2.gain", "copy"),
    "norm2.bias": ("norm2.bias", "copy"),
    "mlp.fc1.weight": ("ffn_in.weight", "transpose"),
    "mlp.fc1.bias": ("ffn_in.bias", "copy"),
    "mlp.fc2.weight": ("ffn_out.weight", "transpose"),
    "mlp.fc2.bias": ("ffn_out.bias", "copy"),
}
_TIMM_STATIC = {
    "cls_token": ("class_token", "squeeze-vector"),
    "pos_embed": ("pos_table", "squeeze-matrix"),
    "patch_embed.proj.weight": ("patch_proj.weight", "conv-flatten"),
    "patch_embed.proj.bias": ("patch_proj.bias", "copy"),
    "norm.weight": ("head.norm.gain", "copy"),
    "norm.bias": ("head.norm.bias", "copy"),
    "head.weight": ("head.linear.weight", "transpose"),
    "head.bias": ("head.linear.bias", "copy"),
}

# transformers block suffix -> timm block suffix (transforms are applied
# later via the timm table, so this is pure renaming)
_HF_TO_TIMM_BLOCK = {
    "layernorm_before.weight": "norm1.weight",
    "layernorm_before.bias": "norm1.bias",
    "attention.output.dense.weight": "attn.proj.weight",
    "attention.output.dense.bias": "attn.proj.bias",
    "layernorm_after.weight": "norm2.weight",
    "layernorm_after.bias": "norm2.bias",
    "intermediate.dense.weight": "mlp.fc1.weight",
    "intermediate.dense.bias": "mlp.fc1.bias",
    "output.dense.weight": "mlp.fc2.weight",
    "output.dense.bias": "mlp.fc2.bias",
}
_HF_QKV = ("attention.attention.query", "attention.attention.key",
           "attention.attention.value")


@dataclass
class MappedCheckpoint:
    """Canonical tensors plus the bookkeeping the manifest records."""

    tensors: dict[str, np.ndarray]
    mapping: dict[str, str]                # source name -> canonical name
    flavor: str                            # "timm" | "transformers"
    pos_convention: str                    # "class-first" | "patch-only"
    embed_dim: int
    depth: int
    patch_px: int
    fine_grid: int
    num_classes: int
    mlp_ratio: int
    notes: list[str] = field(default_factory=list)


def _transform(arr: np.ndarray, how: str) -> np.ndarray:
    if how == "copy":
        return arr
    if how == "transpose":
        return arr.T
    if how == "squeeze-vector":
        return arr.reshape(-1)
    if how == "squeeze-matrix":
        return arr.reshape(arr.shape[-2:])
    if how == "conv-flatten":
        # [D, C, p, p] conv kernel -> [C*p*p, D] with channel-major rows,
        # matching the documented patch pixel order (c, y, x).
        return arr.reshape(arr.shape[0], -1).T
    raise AssertionError(how)


def _to_numpy(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def normalize_names(state_dict: dict) -> dict[str, np.ndarray]:
    """Unwrap common checkpoint envelopes and strip DataParallel prefixes."""
    for key in ("model", "state_dict", "module"):
        inner = state_dict.get(key)
        if isinstance(inner, dict) and inner and all(
                hasattr(v, "shape") for v in inner.values()):
            state_dict = inner
            break
    out = {}
    for name, value in state_dict.items():
        if not hasattr(value, "shape"):
            continue  # optimizer state, metadata scalars, ...
        if name.startswith("module."):
            name = name[len("module."):]
        out[name] = _to_numpy(value)
    if not out:
        raise ExportError("checkpoint holds no tensors")
    return out


def _reject_distilled(names) -> None:
    hits = sorted(n for n in names
                  if any(marker in n for marker in _DISTILLATION_MARKERS))
    if hits:
        raise ExportError(
            "distilled checkpoints are not supported (extra token changes "
            "the positional layout); offending tensors: " + ", ".join(hits)
        )


def detect_flavor(names) -> str:
    if any(n == "patch_embed.proj.weight" for n in names):
        return "timm"
    if any(n.endswith("embeddings.patch_embeddings.projection.weight")
           for n in names):
        return "transformers"
    raise ExportError(
        "unrecognized checkpoint flavor: no patch projection found under "
        "timm ('patch_embed.proj.weight') or transformers "
        "('…embeddings.patch_embeddings.projection.weight') naming"
    )


def _hf_prefix(names) -> str:
    for name in names:
        suffix = "embeddings.patch_embeddings.projection.weight"
        if name.endswith(suffix):
            return name[: len(name) - len(suffix)]
    raise AssertionError("flavor detection let a non-transformers dict through")


def _hf_to_timm(sd: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray],
                                                     dict[str, str]]:
    """Rewrite transformers naming into timm naming (including qkv fusion),
    returning the rewritten dict and source->timm name provenance."""
    prefix = _hf_prefix(sd)
    plain = {
        f"{prefix}embeddings.cls_token": "cls_token",
        f"{prefix}embeddings.position_embeddings": "pos_embed",
        f"{prefix}embeddings.patch_embeddings.projection.weight":
            "patch_embed.proj.weight",
        f"{prefix}embeddings.patch_embeddings.projection.bias":
            "patch_embed.proj.bias",
        f"{prefix}layernorm.weight": "norm.weight",
        f"{prefix}layernorm.bias": "norm.bias",
        "classifier.weight": "head.weight",
        "classifier.bias": "head.bias",
    }
    out: dict[str, np.ndarray] = {}
    provenance: dict[str, str] = {}
    consumed = set()
    for src, dst in plain.items():
        if src in sd:
            out[dst] = sd[src]
            provenance[src] = dst
            consumed.add(src)

    layer = 0
    while True:
        base = f"{prefix}encoder.layer.{layer}."
        if f"{base}layernorm_before.weight" not in sd:
            break
        for part in ("weight", "bias"):
            pieces = []
            for role in _HF_QKV:
                src = f"{base}{role}.{part}"
                if src not in sd:
                    raise ExportError(f"attention tensor missing: {src}")
                pieces.append(sd[src])
                provenance[src] = f"blocks.{layer}.attn.qkv.{part}"
                consumed.add(src)
            out[f"blocks.{layer}.attn.qkv.{part}"] = np.concatenate(pieces, axis=0)
        for suffix, timm_suffix in _HF_TO_TIMM_BLOCK.items():
            src = base + suffix
            if src not in sd:
                raise ExportError(f"encoder tensor missing: {src}")
            out[f"blocks.{layer}.{timm_suffix}"] = sd[src]
            provenance[src] = f"blocks.{layer}.{timm_suffix}"
            consumed.add(src)
        layer += 1

    leftovers = {n: v for n, v in sd.items() if n not in consumed}
    out.update(leftovers)  # surface as unmapped later, under original names
    return out, provenance


def map_checkpoint(raw_state_dict: dict) -> MappedCheckpoint:
    """Resolve a checkpoint into the canonical tensor set.

    Fails with exhaustive lists: every unmapped source tensor and every
    missing required tensor is named in the error, not just the first.
    """
    sd = normalize_names(raw_state_dict)
    _reject_distilled(sd)
    flavor = detect_flavor(sd)
    provenance: dict[str, str] = {}
    if flavor == "transformers":
        sd, provenance = _hf_to_timm(sd)

    tensors: dict[str, np.ndarray] = {}
    mapping: dict[str, str] = {}
    consumed = set()
    originals: dict[str, list[str]] = {}   # timm name -> original source names
    for original, timm_name in provenance.items():
        originals.setdefault(timm_name, []).append(original)

    def claim(src: str, dst: str, how: str) -> None:
        tensors[dst] = _transform(sd[src], how)
        consumed.add(src)
        for original in originals.get(src, [src]):
            mapping[original] = dst

    for src, (dst, how) in _TIMM_STATIC.items():
        if src in sd:
            claim(src, dst, how)
    depth = 0
    while f"blocks.{depth}.norm1.weight" in sd:
        for suffix, (dst_suffix, how) in _TIMM_BLOCK.items():
            src = f"blocks.{depth}.{suffix}"
            if src not in sd:
                raise ExportError(f"encoder tensor missing: {src}")
            claim(src, f"encoder.{depth}.{dst_suffix}", how)
        depth += 1

    unmapped = sorted(set(sd) - consumed)
    if unmapped:
        raise ExportError(
            f"{len(unmapped)} source tensor(s) have no mapping: "
            + ", ".join(unmapped)
        )

    required_static = {dst for dst, _ in _TIMM_STATIC.values()}
    missing = sorted(required_static - set(tensors))
    if depth == 0:
        missing.append("encoder.0.* (no encoder blocks found)")
    if missing:
        raise ExportError("required tensors missing from checkpoint: "
                          + ", ".join(missing))

    return _with_inferred_config(tensors, mapping, flavor, depth)


def _with_inferred_config(tensors, mapping, flavor, depth) -> MappedCheckpoint:
    proj = tensors["patch_proj.weight"]          # [3*p*p, D]
    embed_dim = proj.shape[1]
    patch_px = math.isqrt(proj.shape[0] // 3)
    if 3 * patch_px ** 2 != proj.shape[0]:
        raise ExportError(
            f"patch projection rows {proj.shape[0]} are not 3*p^2 for any p"
        )

    pos = tensors["pos_table"]
    notes = []
    if pos.ndim != 2 or pos.shape[1] != embed_dim:
        raise ExportError(f"positional table shape {pos.shape} unusable")
    grid = math.isqrt(pos.shape[0] - 1)
    if 1 + grid ** 2 == pos.shape[0]:
        convention = "class-first"
    else:
        grid = math.isqrt(pos.shape[0])
        if grid ** 2 != pos.shape[0]:
            raise ExportError(
                f"positional table has {pos.shape[0]} rows; neither 1+g^2 "
                f"(class-first) nor g^2 (patch-only) for any grid g"
            )
        convention = "patch-only"
        tensors["pos_table"] = np.concatenate(
            [np.zeros((1, embed_dim), dtype=pos.dtype), pos])
        notes.append("class position row synthesized as zeros (patch-only "
                     "source convention)")
    if grid % 2:
        raise ExportError(
            f"source patch grid is {grid}x{grid}; the engine needs an even "
            f"grid so every coarse patch owns a 2x2 block of fine patches"
        )

    ffn_in = tensors["encoder.0.ffn_in.weight"]   # [D, R*D]
    if ffn_in.shape[1] % embed_dim:
        raise ExportError(
            f"FFN hidden width {ffn_in.shape[1]} is not an integer multiple "
            f"of embed dim {embed_dim}"
        )
    return MappedCheckpoint(
        tensors=tensors,
        mapping=mapping,
        flavor=flavor,
        pos_convention=convention,
        embed_dim=embed_dim,
        depth=depth,
        patch_px=patch_px,
        fine_grid=grid,
        num_classes=tensors["head.linear.bias"].shape[0],
        mlp_ratio=ffn_in.shape[1] // embed_dim,
        notes=notes,
    )


def infer_heads(embed_dim: int) -> int:
    """Head count is not recoverable from tensor shapes; apply the DeiT
    family convention of 64-wide heads."""
    if embed_dim % HEAD_WIDTH_CONVENTION:
        raise ExportError(
            f"cannot infer head count for embed dim {embed_dim} (not a "
            f"multiple of {HEAD_WIDTH_CONVENTION}); pass --heads explicitly"
        )
    return embed_dim // HEAD_WIDTH_CONVENTION
