"""Feature reuse: project the coarse stage's final tokens through a small
MLP and scatter each split parent's vector into its four child slots of the
fine sequence, so the second stage starts from what the first already
computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConsistencyError
from .model import LAYER_NORM_EPS, FineSlot, TokenSequence
from .tensor import DenseTensor, OpCounter, gelu, layer_norm, matmul


@dataclass(frozen=True)
class ReuseWeights:
    norm_gain: DenseTensor
    norm_bias: DenseTensor
    mlp_in_weight: DenseTensor   # [D, hidden]
    mlp_in_bias: DenseTensor
    mlp_out_weight: DenseTensor  # [hidden, D]
    mlp_out_bias: DenseTensor

    @property
    def hidden_dim(self) -> int:
        return self.mlp_in_weight.shape[1]

    def validate(self, embed_dim: int) -> None:
        h = self.hidden_dim
        expect = {
            "norm_gain": (embed_dim,),
            "norm_bias": (embed_dim,),
            "mlp_in_weight": (embed_dim, h),
            "mlp_in_bias": (h,),
            "mlp_out_weight": (h, embed_dim),
            "mlp_out_bias": (embed_dim,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConsistencyError(f"reuse.{name}: expected {shape}, got {got}")


def build_reuse_tokens(
    coarse_final: DenseTensor,
    coarse_layout,
    fine_seq: TokenSequence,
    selection,
    weights: ReuseWeights,
    cfg: ModelConfig,
    counter: OpCounter | None = None,
) -> DenseTensor:
    """Additive reuse matrix aligned with the fine sequence.

    Each selected parent's final coarse token is normalized, passed through
    the two-layer MLP, and written into all four of its child rows. The class
    row and every unsplit row stay exactly zero.
    """
    if coarse_final.shape[0] != 1 + len(coarse_layout):
        raise ConsistencyError(
            f"coarse tokens have {coarse_final.shape[0]} rows for a layout of "
            f"{len(coarse_layout)} patches"
        )
    chosen = set(selection)
    parent_row = {slot.parent: 1 + i for i, slot in enumerate(coarse_layout)}
    for patch_id in chosen:
        if patch_id - 1 not in parent_row:
            raise ConsistencyError(f"selected patch {patch_id} not in coarse layout")

    rows = sorted(parent_row[pid - 1] for pid in chosen)
    projected: dict[int, np.ndarray] = {}
    if rows:
        gathered = DenseTensor(coarse_final.array[rows])
        normed = layer_norm(gathered, weights.norm_gain, weights.norm_bias, LAYER_NORM_EPS)
        with counter.section("reuse") if counter else _null():
            hidden = gelu(
                DenseTensor(
                    matmul(normed, weights.mlp_in_weight, counter).array
                    + weights.mlp_in_bias.array
                )
            )
            out = (
                matmul(hidden, weights.mlp_out_weight, counter).array
                + weights.mlp_out_bias.array
            )
        projected = {row: out[i] for i, row in enumerate(rows)}

    reuse = np.zeros(fine_seq.tokens.shape, dtype=np.float32)
    for i, slot in enumerate(fine_seq.layout):
        if isinstance(slot, FineSlot) and slot.parent + 1 in chosen:
            reuse[1 + i] = projected[parent_row[slot.parent]]
    return DenseTensor(reuse)


def _null():
    from contextlib import nullcontext

    return nullcontext()
