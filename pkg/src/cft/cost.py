"""Analytic multiply-accumulate accounting for both stages.

A "FLOP" here is one multiply-accumulate inside a matrix product; softmax,
normalization, GELU, and bias adds are excluded by convention, which is what
makes the closed-form totals exactly equal to the instrumented counter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig
from .controller import InferenceResult, fine_token_count, split_count
from .errors import InvalidValueError
from .tensor import OpCounter

# Counter sections that make up one encoder's attention+FFN work. The
# attention output projection is tallied separately (see attn_out below):
# the canonical per-encoder complexity covers only the qkv projection,
# score/apply products, and the FFN.
ENCODER_CORE_SECTIONS = ("qkv", "attn_scores", "attn_apply", "ffn")


def encoder_flops(n: int, d: int) -> tuple[int, int]:
    """Per-encoder (self-attention, FFN) mul-adds at sequence length n.

    sa = 3nd^2 + 2n^2 d covers the qkv projection and the two attention
    matrix products; ffn = 8nd^2 covers the standard 4x-expansion MLP.
    n includes the class token.
    """
    if n < 1 or d < 1:
        raise InvalidValueError(f"need n, d >= 1, got n={n}, d={d}")
    sa = 3 * n * d * d + 2 * n * n * d
    ffn = 8 * n * d * d
    return sa, ffn


def attn_out_flops(n: int, d: int) -> int:
    """Attention output projection, counted apart from the canonical pair."""
    return n * d * d


def embed_flops(patch_tokens: int, cfg: ModelConfig) -> int:
    """Patch-projection cost: one [patch_inputs -> D] product per token."""
    return patch_tokens * cfg.patch_inputs * cfg.embed_dim


def head_flops(cfg: ModelConfig) -> int:
    """Classifier head on the single class token."""
    return cfg.embed_dim * cfg.num_classes


def reuse_flops(n_selected: int, cfg: ModelConfig, hidden: int | None = None) -> int:
    """Warm-start MLP over the selected parents (norm contributes no mul-adds)."""
    h = cfg.embed_dim if hidden is None else hidden
    return 2 * n_selected * cfg.embed_dim * h


def single_pass_flops(cfg: ModelConfig, patch_tokens: int) -> int:
    """One plain forward: encoders + patch embedding + head, no warm start."""
    length = patch_tokens + 1
    sa, ffn = encoder_flops(length, cfg.embed_dim)
    encoders = cfg.depth * (sa + ffn + attn_out_flops(length, cfg.embed_dim))
    return encoders + embed_flops(patch_tokens, cfg) + head_flops(cfg)


def stage_flops(
    cfg: ModelConfig,
    stage: str,
    n_f: int | None = None,
    reuse_hidden: int | None = None,
) -> int:
    """Total mul-adds for one stage of the adaptive pipeline.

    Sums the per-encoder attention/FFN terms over all encoders, the attention
    output projections, the patch-embedding projection, and the head; the
    fine stage additionally pays the feature-reuse MLP over the
    ceil(alpha * n) split parents. The fine token count may be overridden
    with n_f (it defaults to the config's split ratio).
    """
    if stage == "coarse":
        patch_tokens = cfg.n_coarse
        extra = 0
    elif stage == "fine":
        patch_tokens = fine_token_count(cfg.n_coarse, cfg.alpha) if n_f is None else n_f
        extra = reuse_flops(split_count(cfg.n_coarse, cfg.alpha), cfg, reuse_hidden)
    else:
        raise InvalidValueError(f"unknown stage {stage!r}")
    return single_pass_flops(cfg, patch_tokens) + extra


def expected_flops(cfg: ModelConfig, exit_rate: float) -> float:
    """Mean per-image cost at a given early-exit rate.

    Every image pays the coarse stage; a (1 - exit_rate) fraction also pays
    the fine stage. Affine and nonincreasing in exit_rate.
    """
    if not 0.0 <= exit_rate <= 1.0:
        raise InvalidValueError(f"exit rate must lie in [0, 1], got {exit_rate}")
    coarse = stage_flops(cfg, "coarse")
    fine = stage_flops(cfg, "fine")
    return coarse + (1.0 - exit_rate) * fine


@dataclass(frozen=True)
class CostReport:
    """Measured mul-adds of one adaptive run, split by where they went."""

    coarse_flops: int
    fine_flops: int
    reuse_flops: int
    embed_head_flops: int
    total: int

    def __post_init__(self) -> None:
        parts = (self.coarse_flops, self.fine_flops, self.reuse_flops,
                 self.embed_head_flops)
        if any(p < 0 for p in parts) or self.total != sum(parts):
            raise InvalidValueError("cost report parts must be >= 0 and sum to total")


def _encoder_total(counter: OpCounter) -> int:
    return counter.section_total(*ENCODER_CORE_SECTIONS) + counter.section_total("attn_out")


def cost_report(result: InferenceResult) -> CostReport:
    """Fold an inference result's counters into a CostReport."""
    coarse_counter = result.coarse.counter
    coarse = _encoder_total(coarse_counter)
    embed_head = coarse_counter.section_total("embed", "head")
    fine = reuse = 0
    if result.fine is not None:
        fine_counter = result.fine.counter
        fine = _encoder_total(fine_counter)
        reuse = fine_counter.section_total("reuse")
        embed_head += fine_counter.section_total("embed", "head")
    return CostReport(
        coarse_flops=coarse,
        fine_flops=fine,
        reuse_flops=reuse,
        embed_head_flops=embed_head,
        total=coarse + fine + reuse + embed_head,
    )
