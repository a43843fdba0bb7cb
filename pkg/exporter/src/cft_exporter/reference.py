"""Golden-logits forward pass in PyTorch.

Implements the documented compute conventions (docs/cft1-format.md in the
engine repo) directly on the canonical tensor set, in float64, so exported
weights can be validated against an implementation that shares no code with
the engine. The activation is the tanh-form GELU — the engine's documented
form — because golden fixtures exist for tight numeric comparison, not for
reproducing a checkpoint's original training-time activation flavor.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .container import TargetConfig
from .errors import ExportError

LAYER_NORM_EPS = 1e-6


def _t(tensors: dict[str, np.ndarray], name: str) -> torch.Tensor:
    return torch.from_numpy(np.asarray(tensors[name], dtype=np.float64))


def _fine_patch_rows(image: torch.Tensor, grid: int, patch: int) -> torch.Tensor:
    """(3, g*p, g*p) image -> (g*g, 3*p*p) rows, channel-major per patch."""
    c, h, w = image.shape
    if (c, h, w) != (3, grid * patch, grid * patch):
        raise ExportError(
            f"golden image is {tuple(image.shape)}, config needs "
            f"(3, {grid * patch}, {grid * patch})"
        )
    x = image.view(3, grid, patch, grid, patch)
    return x.permute(1, 3, 0, 2, 4).reshape(grid * grid, 3 * patch * patch)


@torch.no_grad()
def reference_logits(tensors: dict[str, np.ndarray], cfg: TargetConfig,
                     image: np.ndarray) -> np.ndarray:
    """Full fine-grid single-pass logits for a standardized (3, H, W) image."""
    d, heads = cfg.embed_dim, cfg.heads
    head_dim = d // heads
    img = torch.from_numpy(np.asarray(image, dtype=np.float64))

    rows = _fine_patch_rows(img, cfg.fine_grid, cfg.patch_px)
    x = rows @ _t(tensors, "patch_proj.weight") + _t(tensors, "patch_proj.bias")
    cls = _t(tensors, "class_token").unsqueeze(0)
    x = torch.cat([cls, x], dim=0) + _t(tensors, "pos_table")

    for k in range(cfg.depth):
        def w(field: str, k=k) -> torch.Tensor:
            return _t(tensors, f"encoder.{k}.{field}")

        h = F.layer_norm(x, (d,), w("norm1.gain"), w("norm1.bias"),
                         eps=LAYER_NORM_EPS)
        qkv = h @ w("qkv.weight") + w("qkv.bias")
        q, key, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        ctx = torch.empty_like(h)
        for hd in range(heads):
            cols = slice(hd * head_dim, (hd + 1) * head_dim)
            scores = q[:, cols] @ key[:, cols].T / head_dim ** 0.5
            ctx[:, cols] = torch.softmax(scores, dim=-1) @ v[:, cols]
        x = x + ctx @ w("attn_out.weight") + w("attn_out.bias")

        h = F.layer_norm(x, (d,), w("norm2.gain"), w("norm2.bias"),
                         eps=LAYER_NORM_EPS)
        h = F.gelu(h @ w("ffn_in.weight") + w("ffn_in.bias"),
                   approximate="tanh")
        x = x + h @ w("ffn_out.weight") + w("ffn_out.bias")

    cls_final = F.layer_norm(x[0], (d,), _t(tensors, "head.norm.gain"),
                             _t(tensors, "head.norm.bias"), eps=LAYER_NORM_EPS)
    logits = cls_final @ _t(tensors, "head.linear.weight") \
        + _t(tensors, "head.linear.bias")
    return logits.numpy()
