"""Attention telemetry: the running class-attention average that decides
which patches get re-split, plus probability/confidence helpers shared by
the controller and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidValueError
from .tensor import DenseTensor, softmax_rows


@dataclass(frozen=True)
class GlobalAttentionState:
    """Exponential moving average of per-encoder class attention.

    `value` is None until the configured start encoder has contributed.
    `updates` counts how many encoders have folded in so far.
    """

    value: DenseTensor | None
    updates: int

    @classmethod
    def empty(cls) -> "GlobalAttentionState":
        return cls(None, 0)


def update_global_attention(
    state: GlobalAttentionState,
    class_attention: DenseTensor,
    beta: float,
    encoder_index: int,
    start_index: int,
) -> GlobalAttentionState:
    """Fold one encoder's class attention into the running average.

    Encoders are numbered from 1. Indices below start_index leave the state
    untouched; the start encoder seeds the average with its own attention;
    later ones blend as beta * old + (1 - beta) * new.
    """
    if not 0.0 <= beta <= 1.0:
        raise InvalidValueError(f"beta must lie in [0, 1], got {beta}")
    if encoder_index < 1:
        raise InvalidValueError(f"encoder index is 1-based, got {encoder_index}")
    if encoder_index < start_index:
        return state
    if state.value is None:
        return GlobalAttentionState(class_attention, 1)
    if state.value.shape != class_attention.shape:
        raise ConsistencyError(
            f"class attention width changed: {state.value.shape} "
            f"vs {class_attention.shape}"
        )
    old = state.value.array.astype(np.float64)
    new = class_attention.array.astype(np.float64)
    blended = beta * old + (1.0 - beta) * new
    return GlobalAttentionState(
        DenseTensor(blended.astype(np.float32)), state.updates + 1
    )


def rank_patches(global_attention: DenseTensor) -> tuple[int, ...]:
    """Order patch ids by informativeness, most attended first.

    Input is a class-attention vector over the full sequence; entry 0 (the
    class token's attention to itself) is ignored. Returns 1-based patch ids;
    equal scores keep the smaller id first.
    """
    if len(global_attention.shape) != 1:
        raise ConsistencyError(
            f"expected a vector of attention scores, got shape {global_attention.shape}"
        )
    if global_attention.shape[0] < 2:
        raise ConsistencyError("attention vector holds no patch entries")
    scores = global_attention.array[1:]
    order = np.argsort(-scores, kind="stable")
    return tuple(int(i) + 1 for i in order)


def probabilities(logits: DenseTensor) -> DenseTensor:
    """Softmax over a logit vector."""
    if len(logits.shape) != 1:
        raise ConsistencyError(f"logits must be a vector, got shape {logits.shape}")
    return DenseTensor(softmax_rows(DenseTensor(logits.array[None, :])).array[0])


def confidence(probs: DenseTensor) -> float:
    """Largest class probability."""
    return float(probs.array.max())


def top_class(probs: DenseTensor) -> int:
    """0-based index of the most probable class (ties to the smaller index)."""
    return int(probs.array.argmax())


def cross_entropy(probs: DenseTensor, label: int) -> float:
    """-log p[label], with probabilities clamped away from zero at 1e-12."""
    if not 0 <= label < probs.shape[0]:
        raise InvalidValueError(
            f"label {label} outside 0..{probs.shape[0] - 1}"
        )
    p = max(float(probs.array[label]), 1e-12)
    return -float(np.log(p))


def kl_divergence(p: DenseTensor, q: DenseTensor) -> float:
    """KL(p || q) in nats, with 0 * log 0 taken as 0."""
    if p.shape != q.shape:
        raise ConsistencyError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    pa = p.array.astype(np.float64)
    qa = np.maximum(q.array.astype(np.float64), 1e-12)
    mask = pa > 0.0
    return float(np.sum(pa[mask] * (np.log(pa[mask]) - np.log(qa[mask]))))
