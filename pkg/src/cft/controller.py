"""Two-stage adaptive control: run the cheap coarse pass, exit early when
the prediction is confident enough, otherwise re-split the most informative
patches and run the fine pass with feature reuse.

Token arithmetic is done in exact rationals so the closed-form count always
agrees with the structurally assembled sequence; see fine_token_count.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import ceil, floor

from .config import ModelConfig
from .errors import InvalidValueError
from .model import (
    ModelWeights,
    TokenSequence,
    coarse_layout,
    embed_patches,
    forward,
    mixed_layout,
)
from .reuse import build_reuse_tokens
from .tensor import DenseTensor, OpCounter
from .telemetry import (
    confidence,
    cross_entropy,
    kl_divergence,
    probabilities,
    rank_patches,
    top_class,
)

# Denominator cap when snapping a float split ratio to a rational. Covers
# every ratio a CLI user can plausibly spell (multiples of 0.0001 and far
# beyond) while staying well under float precision.
_RATIO_DENOMINATOR_CAP = 1_000_000


def _snap_ratio(alpha: float) -> Fraction:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidValueError(f"split ratio must lie in [0, 1], got {alpha}")
    return Fraction(alpha).limit_denominator(_RATIO_DENOMINATOR_CAP)


def split_count(n_coarse: int, alpha: float) -> int:
    """Number of coarse patches chosen for re-splitting: ceil(alpha * n)."""
    if n_coarse < 1:
        raise InvalidValueError(f"patch count must be positive, got {n_coarse}")
    return ceil(_snap_ratio(alpha) * n_coarse)


def fine_token_count(n_coarse: int, alpha: float) -> int:
    """Patch tokens in the fine stage: 4*ceil(n*alpha) + floor(n*(1-alpha)).

    Evaluated in exact rational arithmetic after snapping alpha, so the two
    rounding terms always partition n and the result equals
    n_coarse + 3 * split_count exactly for every input.
    """
    if n_coarse < 1:
        raise InvalidValueError(f"patch count must be positive, got {n_coarse}")
    ratio = _snap_ratio(alpha)
    return 4 * ceil(ratio * n_coarse) + floor((1 - ratio) * n_coarse)


def select_patches(ranking: tuple[int, ...], count: int) -> tuple[int, ...]:
    """First `count` patch ids from an informativeness ranking."""
    if not 0 <= count <= len(ranking):
        raise InvalidValueError(
            f"cannot select {count} of {len(ranking)} ranked patches"
        )
    return ranking[:count]


def should_exit(conf: float, eta: float) -> bool:
    """Early-exit rule: leave after the coarse stage iff confidence >= eta.

    eta = 1.0 is the always-refine setting: no exit even at confidence 1.0.
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidValueError(f"exit threshold must lie in [0, 1], got {eta}")
    if eta >= 1.0:
        return False
    return conf >= eta


@dataclass(frozen=True)
class StageOutcome:
    """Everything one stage produced."""

    logits: DenseTensor
    probs: DenseTensor
    confidence: float
    predicted_class: int
    sequence_length: int
    global_attention: DenseTensor | None
    per_encoder_class_attention: tuple[DenseTensor, ...]
    counter: OpCounter


@dataclass(frozen=True)
class InferenceResult:
    """Outcome of one adaptive two-stage run."""

    coarse: StageOutcome
    exited_early: bool
    selection: tuple[int, ...] | None
    fine: StageOutcome | None

    @property
    def final(self) -> StageOutcome:
        return self.coarse if self.exited_early else self.fine

    @property
    def total_mul_adds(self) -> int:
        total = self.coarse.counter.mul_adds
        if self.fine is not None:
            total += self.fine.counter.mul_adds
        return total


def evaluate_losses(
    coarse_probs: DenseTensor, fine_probs: DenseTensor, label: int
) -> dict[str, float]:
    """Forward-only loss terms for one image.

    Returns ce_fine, kl_coarse_fine, and ce_coarse separately; the two
    composite objectives in use are ce_fine + kl_coarse_fine and
    ce_fine + ce_coarse, both assemblable from these parts.
    """
    return {
        "ce_fine": cross_entropy(fine_probs, label),
        "kl_coarse_fine": kl_divergence(coarse_probs, fine_probs),
        "ce_coarse": cross_entropy(coarse_probs, label),
    }


def _run_stage(seq: TokenSequence, cfg: ModelConfig, w: ModelWeights,
               counter: OpCounter) -> StageOutcome:
    logits, trace = forward(seq, cfg, w, counter)
    probs = probabilities(logits)
    return StageOutcome(
        logits=logits,
        probs=probs,
        confidence=confidence(probs),
        predicted_class=top_class(probs),
        sequence_length=seq.length,
        global_attention=trace.global_attention.value,
        per_encoder_class_attention=trace.per_encoder_class_attention,
        counter=counter,
    )


def run_inference(
    image: DenseTensor,
    cfg: ModelConfig,
    w: ModelWeights,
    eta: float,
    use_reuse: bool = True,
) -> InferenceResult:
    """Full adaptive pass over one standardized image.

    The coarse stage always runs. If its peak probability reaches eta the
    result is returned as-is; otherwise the ceil(alpha * n) most attended
    patches are re-split into 2x2 fine patches, the coarse stage's final
    tokens are projected in as a warm start (unless use_reuse is off), and
    the fine stage decides.
    """
    coarse_counter = OpCounter()
    coarse_seq = embed_patches(image, "coarse", None, cfg, w, coarse_counter)
    logits, trace = forward(coarse_seq, cfg, w, coarse_counter)
    probs = probabilities(logits)
    coarse = StageOutcome(
        logits=logits,
        probs=probs,
        confidence=confidence(probs),
        predicted_class=top_class(probs),
        sequence_length=coarse_seq.length,
        global_attention=trace.global_attention.value,
        per_encoder_class_attention=trace.per_encoder_class_attention,
        counter=coarse_counter,
    )
    if should_exit(coarse.confidence, eta):
        return InferenceResult(coarse, True, None, None)

    ranking = rank_patches(trace.global_attention.value)
    selection = select_patches(ranking, split_count(cfg.n_coarse, cfg.alpha))

    fine_counter = OpCounter()
    fine_seq = embed_patches(image, "fine", selection, cfg, w, fine_counter)
    if use_reuse and selection:
        reuse = build_reuse_tokens(
            trace.final_tokens, coarse_seq.layout, fine_seq, selection,
            w.reuse, cfg, fine_counter,
        )
        fine_seq = TokenSequence(
            DenseTensor(fine_seq.tokens.array + reuse.array), fine_seq.layout
        )
    fine = _run_stage(fine_seq, cfg, w, fine_counter)
    return InferenceResult(coarse, False, selection, fine)
