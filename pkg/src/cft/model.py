"""Shared ViT backbone: patch embedding at two granularities through one
projection, a single fine-grid positional table, pre-norm encoder blocks that
emit class attention, and the classifier head. Both inference stages run the
exact same parameters through this module.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Union

import numpy as np

from .config import ModelConfig
from .errors import ConsistencyError, ShapeError
from .tensor import DenseTensor, OpCounter, gelu, layer_norm, matmul, softmax_rows

LAYER_NORM_EPS = 1e-6


class CoarseSlot(NamedTuple):
    """One unsplit coarse patch; parent is the 0-based coarse cell in raster order."""

    parent: int


class FineSlot(NamedTuple):
    """One fine patch; child 0..3 walks the parent's 2x2 cells as TL, TR, BL, BR."""

    parent: int
    child: int


Slot = Union[CoarseSlot, FineSlot]


@dataclass(frozen=True)
class TokenSequence:
    """Token matrix plus the layout tagging each non-class row.

    Row 0 is always the [class] token; layout[i] describes row i+1. Sequences
    assembled for the fine stage keep the four children of a split parent
    contiguous in TL,TR,BL,BR order; full-fine sequences use plain raster
    order over the fine grid.
    """

    tokens: DenseTensor
    layout: tuple[Slot, ...]

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != 1 + len(self.layout):
            raise ConsistencyError(
                f"{self.tokens.shape[0]} token rows need a layout of length "
                f"{self.tokens.shape[0] - 1}, got {len(self.layout)}"
            )

    @property
    def length(self) -> int:
        """Total rows including the class token."""
        return self.tokens.shape[0]


@dataclass(frozen=True)
class EncoderWeights:
    norm1_gain: DenseTensor
    norm1_bias: DenseTensor
    qkv_weight: DenseTensor      # [D, 3D], output columns ordered q | k | v
    qkv_bias: DenseTensor        # [3D]
    attn_out_weight: DenseTensor  # [D, D]
    attn_out_bias: DenseTensor
    norm2_gain: DenseTensor
    norm2_bias: DenseTensor
    ffn_in_weight: DenseTensor   # [D, mlp_ratio*D]
    ffn_in_bias: DenseTensor
    ffn_out_weight: DenseTensor  # [mlp_ratio*D, D]
    ffn_out_bias: DenseTensor


@dataclass(frozen=True)
class ModelWeights:
    """Immutable named-tensor bundle for the whole model."""

    patch_proj_weight: DenseTensor  # [3*p*p, D], input flattened channel-major (c, y, x)
    patch_proj_bias: DenseTensor    # [D]
    class_token: DenseTensor        # [D]
    pos_table: DenseTensor          # [1 + fine_grid^2, D], class entry in row 0
    encoders: tuple[EncoderWeights, ...]
    reuse: "ReuseWeights"
    head_norm_gain: DenseTensor
    head_norm_bias: DenseTensor
    head_weight: DenseTensor        # [D, num_classes]
    head_bias: DenseTensor

    def validate(self, cfg: ModelConfig) -> None:
        """Raise ConsistencyError unless every tensor shape matches cfg."""
        from .reuse import ReuseWeights  # cycle guard

        d, n = cfg.embed_dim, cfg.num_classes
        expect = {
            "patch_proj_weight": (cfg.patch_inputs, d),
            "patch_proj_bias": (d,),
            "class_token": (d,),
            "pos_table": (1 + cfg.n_fine_full, d),
            "head_norm_gain": (d,),
            "head_norm_bias": (d,),
            "head_weight": (d, n),
            "head_bias": (n,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConsistencyError(f"{name}: expected shape {shape}, got {got}")
        if len(self.encoders) != cfg.depth:
            raise ConsistencyError(
                f"expected {cfg.depth} encoder blocks, got {len(self.encoders)}"
            )
        enc_expect = {
            "norm1_gain": (d,), "norm1_bias": (d,),
            "qkv_weight": (d, 3 * d), "qkv_bias": (3 * d,),
            "attn_out_weight": (d, d), "attn_out_bias": (d,),
            "norm2_gain": (d,), "norm2_bias": (d,),
            "ffn_in_weight": (d, cfg.ffn_dim), "ffn_in_bias": (cfg.ffn_dim,),
            "ffn_out_weight": (cfg.ffn_dim, d), "ffn_out_bias": (d,),
        }
        for i, enc in enumerate(self.encoders):
            for f in fields(enc):
                got = getattr(enc, f.name).shape
                if got != enc_expect[f.name]:
                    raise ConsistencyError(
                        f"encoder.{i}.{f.name}: expected {enc_expect[f.name]}, got {got}"
                    )
        if not isinstance(self.reuse, ReuseWeights):
            raise ConsistencyError("reuse weights missing")
        self.reuse.validate(d)


def coarse_layout(cfg: ModelConfig) -> tuple[Slot, ...]:
    """Raster order over the coarse grid."""
    return tuple(CoarseSlot(i) for i in range(cfg.n_coarse))


def full_fine_layout(cfg: ModelConfig) -> tuple[Slot, ...]:
    """Classic raster order over the fine grid (parent/child tags derived)."""
    g = cfg.fine_grid
    slots = []
    for row in range(g):
        for col in range(g):
            parent = (row // 2) * cfg.coarse_grid + (col // 2)
            child = (row % 2) * 2 + (col % 2)
            slots.append(FineSlot(parent, child))
    return tuple(slots)


def fine_cell(slot: FineSlot, cfg: ModelConfig) -> int:
    """0-based raster index of a fine slot's cell in the fine grid."""
    prow, pcol = divmod(slot.parent, cfg.coarse_grid)
    return (2 * prow + slot.child // 2) * cfg.fine_grid + (2 * pcol + slot.child % 2)


def positional_lookup(slot: Slot | None, cfg: ModelConfig, w: ModelWeights) -> DenseTensor:
    """Positional embedding for one layout slot (None means the class slot).

    Fine slots read the fine-grid table directly; coarse slots take the mean
    of the four fine entries covering the parent, so coarse, fine, and mixed
    sequences all draw from one table.
    """
    return DenseTensor(_position_row(slot, cfg, w))


def _position_row(slot: Slot | None, cfg: ModelConfig, w: ModelWeights) -> np.ndarray:
    table = w.pos_table.array
    if slot is None:
        return table[0]
    if isinstance(slot, FineSlot):
        if not (0 <= slot.parent < cfg.n_coarse and 0 <= slot.child < 4):
            raise ConsistencyError(f"slot out of grid bounds: {slot}")
        return table[1 + fine_cell(slot, cfg)]
    if not 0 <= slot.parent < cfg.n_coarse:
        raise ConsistencyError(f"slot out of grid bounds: {slot}")
    rows = [1 + fine_cell(FineSlot(slot.parent, c), cfg) for c in range(4)]
    return table[rows].astype(np.float64).mean(axis=0).astype(np.float32)


def _pool_coarse_patch(block: np.ndarray) -> np.ndarray:
    """2x2 average-pool a [3, 2p, 2p] pixel block down to [3, p, p]."""
    c, h, w_ = block.shape
    pooled = block.reshape(c, h // 2, 2, w_ // 2, 2).astype(np.float64)
    return pooled.mean(axis=(2, 4)).astype(np.float32)


def _patch_pixels(image: np.ndarray, slot: Slot, cfg: ModelConfig) -> np.ndarray:
    """Flattened (c, y, x) pixel vector for one slot, pooled if coarse."""
    p = cfg.patch_px
    if isinstance(slot, FineSlot):
        cell = fine_cell(slot, cfg)
        row, col = divmod(cell, cfg.fine_grid)
        return image[:, row * p:(row + 1) * p, col * p:(col + 1) * p].reshape(-1)
    row, col = divmod(slot.parent, cfg.coarse_grid)
    block = image[:, row * 2 * p:(row + 1) * 2 * p, col * 2 * p:(col + 1) * 2 * p]
    return _pool_coarse_patch(block).reshape(-1)


def embed_patches(
    image: DenseTensor,
    granularity: str,
    selection,
    cfg: ModelConfig,
    w: ModelWeights,
    counter: OpCounter | None = None,
) -> TokenSequence:
    """Project image patches into tokens and add positional embeddings.

    granularity "coarse" pools each 2p-by-2p patch down to p-by-p before the
    shared projection; "fine" projects p-by-p patches directly. With a
    selection (1-based coarse patch ids) only those parents are split and the
    rest stay coarse, giving the mixed fine-stage sequence.
    """
    side = cfg.image_px
    if image.shape != (3, side, side):
        raise ShapeError(
            f"image must be (3, {side}, {side}) for this config, got {image.shape}"
        )
    if granularity == "coarse":
        if selection is not None:
            raise ConsistencyError("selection only applies to fine granularity")
        layout = coarse_layout(cfg)
    elif granularity == "fine":
        if selection is None:
            layout = full_fine_layout(cfg)
        else:
            layout = mixed_layout(selection, cfg)
    else:
        raise ConsistencyError(f"unknown granularity {granularity!r}")

    pixels = image.array
    flat = np.stack([_patch_pixels(pixels, slot, cfg) for slot in layout])
    with _maybe_section(counter, "embed"):
        projected = matmul(DenseTensor(flat), w.patch_proj_weight, counter).array
    projected = projected + w.patch_proj_bias.array

    rows = np.empty((1 + len(layout), cfg.embed_dim), dtype=np.float32)
    rows[0] = w.class_token.array + _position_row(None, cfg, w)
    for i, slot in enumerate(layout):
        rows[1 + i] = projected[i] + _position_row(slot, cfg, w)
    return TokenSequence(DenseTensor(rows), layout)


def mixed_layout(selection, cfg: ModelConfig) -> tuple[Slot, ...]:
    """Layout for the fine stage: raster over parents, selected ones split in place.

    selection holds 1-based coarse patch ids (the indexing of class-attention
    vectors, where entry 0 is the class token).
    """
    chosen = set(selection)
    for patch_id in chosen:
        if not 1 <= patch_id <= cfg.n_coarse:
            raise ConsistencyError(
                f"patch id {patch_id} outside 1..{cfg.n_coarse}"
            )
    slots: list[Slot] = []
    for parent in range(cfg.n_coarse):
        if parent + 1 in chosen:
            slots.extend(FineSlot(parent, c) for c in range(4))
        else:
            slots.append(CoarseSlot(parent))
    return tuple(slots)


def self_attention(
    x: DenseTensor,
    layer: EncoderWeights,
    heads: int,
    counter: OpCounter | None = None,
) -> tuple[DenseTensor, DenseTensor]:
    """Multi-head self-attention over already-normalized tokens.

    Returns the projected context and the per-head post-softmax attention
    stacked as [heads, L, L]. Per-head logits are scaled by sqrt(D/heads).
    """
    length, dim = x.shape
    head_dim = dim // heads
    scale = 1.0 / np.sqrt(head_dim)

    with _maybe_section(counter, "qkv"):
        qkv = matmul(x, layer.qkv_weight, counter).array
    qkv = qkv + layer.qkv_bias.array
    q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]

    context = np.empty((length, dim), dtype=np.float32)
    attn = np.empty((heads, length, length), dtype=np.float32)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        with _maybe_section(counter, "attn_scores"):
            scores = matmul(
                DenseTensor(q[:, lo:hi]), DenseTensor(k[:, lo:hi].T), counter
            )
        weights = softmax_rows(DenseTensor(scores.array * np.float32(scale)))
        attn[h] = weights.array
        with _maybe_section(counter, "attn_apply"):
            context[:, lo:hi] = matmul(weights, DenseTensor(v[:, lo:hi]), counter).array

    with _maybe_section(counter, "attn_out"):
        out = matmul(DenseTensor(context), layer.attn_out_weight, counter).array
    return DenseTensor(out + layer.attn_out_bias.array), DenseTensor(attn)


def encoder_forward(
    tokens: DenseTensor,
    layer: EncoderWeights,
    heads: int,
    counter: OpCounter | None = None,
) -> tuple[DenseTensor, DenseTensor]:
    """One pre-norm encoder block: x + MHSA(norm1(x)), then + FFN(norm2(.)).

    Also returns the class attention: row 0 of the post-softmax attention,
    averaged over heads.
    """
    normed = layer_norm(tokens, layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS)
    attended, attn = self_attention(normed, layer, heads, counter)
    x = tokens.array + attended.array

    normed2 = layer_norm(
        DenseTensor(x), layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS
    )
    with _maybe_section(counter, "ffn"):
        hidden = gelu(
            DenseTensor(
                matmul(normed2, layer.ffn_in_weight, counter).array
                + layer.ffn_in_bias.array
            )
        )
        ffn_out = matmul(hidden, layer.ffn_out_weight, counter).array
    x = x + ffn_out + layer.ffn_out_bias.array

    class_attention = attn.array[:, 0, :].astype(np.float64).mean(axis=0)
    return DenseTensor(x), DenseTensor(class_attention.astype(np.float32))


@dataclass(frozen=True)
class ForwardTrace:
    """Everything one pass records: per-encoder class attention, its running
    average, and the final token sequence."""

    per_encoder_class_attention: tuple[DenseTensor, ...]
    global_attention: "GlobalAttentionState"
    final_tokens: DenseTensor


def forward(
    seq: TokenSequence,
    cfg: ModelConfig,
    w: ModelWeights,
    counter: OpCounter | None = None,
) -> tuple[DenseTensor, ForwardTrace]:
    """Run all encoders and the classifier head; return pre-softmax logits."""
    from .telemetry import GlobalAttentionState, update_global_attention

    tokens = seq.tokens
    attentions: list[DenseTensor] = []
    state = GlobalAttentionState.empty()
    for k, layer in enumerate(w.encoders, start=1):
        tokens, class_attention = encoder_forward(tokens, layer, cfg.heads, counter)
        attentions.append(class_attention)
        state = update_global_attention(
            state, class_attention, cfg.beta, k, cfg.ema_start
        )

    class_final = DenseTensor(tokens.array[:1])
    normed = layer_norm(class_final, w.head_norm_gain, w.head_norm_bias, LAYER_NORM_EPS)
    with _maybe_section(counter, "head"):
        logits = matmul(normed, w.head_weight, counter).array[0] + w.head_bias.array
    trace = ForwardTrace(tuple(attentions), state, tokens)
    return DenseTensor(logits), trace


def _maybe_section(counter: OpCounter | None, label: str):
    from contextlib import nullcontext

    return nullcontext() if counter is None else counter.section(label)
