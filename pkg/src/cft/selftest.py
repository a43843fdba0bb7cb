"""Built-in oracle suite: slow, obviously-correct references checked against
the production kernels. Each check can be deliberately broken through the
CLI's --break flag to prove the harness actually detects faults.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ModelConfig
from .controller import fine_token_count, run_inference, split_count
from .cost import ENCODER_CORE_SECTIONS, encoder_flops
from .errors import InvalidValueError
from .model import embed_patches, forward, self_attention
from .tensor import DenseTensor, OpCounter
from .weights_io import generate_synthetic

CHECK_NAMES = ("attention", "token-count", "complexity", "degenerate")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def naive_self_attention(x, qkv_weight, qkv_bias, out_weight, out_bias, heads):
    """Reference multi-head attention in plain Python floats, O(n^3) loops.

    Everything is double precision with no vectorization; the production
    kernel must agree with this to tight absolute tolerance.
    """
    xs = [list(map(float, row)) for row in x]
    wq = [list(map(float, row)) for row in qkv_weight]
    bq = list(map(float, qkv_bias))
    wo = [list(map(float, row)) for row in out_weight]
    bo = list(map(float, out_bias))
    length, dim = len(xs), len(xs[0])
    head_dim = dim // heads
    scale = 1.0 / math.sqrt(head_dim)

    qkv = [[sum(xs[i][k] * wq[k][j] for k in range(dim)) + bq[j]
            for j in range(3 * dim)] for i in range(length)]
    context = [[0.0] * dim for _ in range(length)]
    attn = [[[0.0] * length for _ in range(length)] for _ in range(heads)]
    for h in range(heads):
        lo = h * head_dim
        for i in range(length):
            scores = []
            for j in range(length):
                s = sum(qkv[i][lo + c] * qkv[j][dim + lo + c]
                        for c in range(head_dim))
                scores.append(s * scale)
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            norm = sum(exps)
            weights = [e / norm for e in exps]
            attn[h][i] = weights
            for c in range(head_dim):
                context[i][lo + c] = sum(
                    weights[j] * qkv[j][2 * dim + lo + c] for j in range(length)
                )
    out = [[sum(context[i][k] * wo[k][j] for k in range(dim)) + bo[j]
            for j in range(dim)] for i in range(length)]
    return out, attn


def check_attention(broken: bool = False, instances: int = 8,
                    tolerance: float = 1e-6) -> CheckResult:
    """Production attention vs. the triple-loop reference."""
    rng = np.random.default_rng(20240817)
    worst = 0.0
    for _ in range(instances):
        length = int(rng.integers(2, 13))
        heads = int(rng.choice([1, 2, 4]))
        dim = heads * int(rng.integers(1, 5))
        cfg = ModelConfig(coarse_grid=1, patch_px=2, embed_dim=dim, depth=1,
                          heads=heads, num_classes=3, ema_start=1)
        w = generate_synthetic(cfg, seed=int(rng.integers(1 << 30)))
        layer = w.encoders[0]
        x = DenseTensor(rng.standard_normal((length, dim)) * 0.5)

        got, got_attn = self_attention(x, layer, heads)
        want, want_attn = naive_self_attention(
            x.array, layer.qkv_weight.array, layer.qkv_bias.array,
            layer.attn_out_weight.array, layer.attn_out_bias.array, heads,
        )
        got_out = got.array.astype(np.float64)
        if broken:
            got_out = got_out + 1e-3
        worst = max(worst, float(np.abs(got_out - np.array(want)).max()))
        worst = max(worst, float(
            np.abs(got_attn.array.astype(np.float64) - np.array(want_attn)).max()
        ))
    return CheckResult(
        "attention", worst <= tolerance,
        f"max |kernel - reference| = {worst:.3g} over {instances} instances",
    )


def check_token_count(broken: bool = False, max_patches: int = 400) -> CheckResult:
    """Closed-form fine token count vs. structurally counting the layout.

    The broken variant evaluates the rounding terms in IEEE floats, the exact
    failure mode the rational implementation exists to rule out.
    """
    bad = 0
    first = ""
    for n in range(1, max_patches + 1):
        for k in range(21):
            alpha = k / 20
            split = split_count(n, alpha)
            structural = 4 * split + (n - split)
            if broken:
                got = 4 * math.ceil(n * alpha) + math.floor(n * (1 - alpha))
            else:
                got = fine_token_count(n, alpha)
            if got != structural:
                bad += 1
                if not first:
                    first = f" (first at n={n}, ratio={alpha})"
    return CheckResult(
        "token-count", bad == 0,
        f"{bad} mismatches over {max_patches * 21} grid points{first}",
    )


def check_complexity(broken: bool = False) -> CheckResult:
    """Closed-form per-encoder cost vs. the instrumented counter, exactly."""
    mismatches = []
    for grid, dim, heads in ((1, 8, 2), (2, 16, 4)):
        cfg = ModelConfig(coarse_grid=grid, patch_px=2, embed_dim=dim, depth=2,
                          heads=heads, num_classes=5, ema_start=2)
        w = generate_synthetic(cfg, seed=7)
        rng = np.random.default_rng(11)
        image = DenseTensor(rng.standard_normal((3, cfg.image_px, cfg.image_px)))
        counter = OpCounter()
        seq = embed_patches(image, "coarse", None, cfg, w, counter)
        forward(seq, cfg, w, counter)
        sa, ffn = encoder_flops(seq.length, dim)
        want = cfg.depth * (sa + ffn)
        sections = ENCODER_CORE_SECTIONS if not broken else ENCODER_CORE_SECTIONS[1:]
        got = counter.section_total(*sections)
        if got != want:
            mismatches.append(f"L={seq.length},D={dim}: counter {got} vs formula {want}")
    return CheckResult(
        "complexity",
        not mismatches,
        "; ".join(mismatches) if mismatches else "counter matches formula exactly",
    )


def check_degenerate(broken: bool = False, tolerance: float = 1e-5) -> CheckResult:
    """Split-everything mode vs. a plain single-pass run on the fine grid.

    With every patch selected and the warm start disabled, the adaptive
    pipeline's fine stage must reproduce a direct full-resolution forward up
    to sequence-order effects.
    """
    cfg = ModelConfig(coarse_grid=2, patch_px=4, embed_dim=64, depth=4,
                      heads=4, num_classes=10, alpha=1.0)
    w = generate_synthetic(cfg, seed=99)
    rng = np.random.default_rng(13)
    image = DenseTensor(rng.standard_normal((3, cfg.image_px, cfg.image_px)) * 0.5)

    result = run_inference(image, cfg, w, eta=1.0, use_reuse=broken)
    direct_seq = embed_patches(image, "fine", None, cfg, w)
    direct_logits, _ = forward(direct_seq, cfg, w)

    a = result.fine.logits.array.astype(np.float64)
    b = direct_logits.array.astype(np.float64)
    rel = float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))
    return CheckResult(
        "degenerate", rel <= tolerance,
        f"max relative logit gap = {rel:.3g}",
    )


def run_selftest(broken: str | None = None) -> tuple[list[CheckResult], float]:
    """Run every check; returns results and elapsed seconds."""
    if broken is not None and broken not in CHECK_NAMES:
        raise InvalidValueError(
            f"unknown check {broken!r}; choose from {', '.join(CHECK_NAMES)}"
        )
    started = time.perf_counter()
    results = [
        check_attention(broken == "attention"),
        check_token_count(broken == "token-count"),
        check_complexity(broken == "complexity"),
        check_degenerate(broken == "degenerate"),
    ]
    return results, time.perf_counter() - started
