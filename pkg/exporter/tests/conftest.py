import shutil
import subprocess

import numpy as np
import pytest
import torch


def make_timm_state_dict(grid=4, dim=64, depth=2, patch=4, classes=5,
                         ratio=4, seed=0, include_head=True,
                         patch_only_pos=False):
    """A ViT state dict in the timm/DeiT naming scheme with seeded init.

    Shapes follow PyTorch conventions exactly (linear weights [out, in],
    conv kernels [out, in, kh, kw]) so the exporter's transposes are
    exercised for real.
    """
    gen = torch.Generator().manual_seed(seed)

    def randn(*shape, scale=1.0):
        return torch.randn(*shape, generator=gen) * scale

    sd = {
        "cls_token": randn(1, 1, dim, scale=0.02),
        "pos_embed": randn(1, grid * grid if patch_only_pos
                           else 1 + grid * grid, dim, scale=0.02),
        "patch_embed.proj.weight": randn(dim, 3, patch, patch,
                                         scale=(3 * patch * patch) ** -0.5),
        "patch_embed.proj.bias": torch.zeros(dim),
    }
    for k in range(depth):
        b = f"blocks.{k}."
        sd[b + "norm1.weight"] = torch.ones(dim)
        sd[b + "norm1.bias"] = torch.zeros(dim)
        sd[b + "attn.qkv.weight"] = randn(3 * dim, dim, scale=dim ** -0.5)
        sd[b + "attn.qkv.bias"] = torch.zeros(3 * dim)
        sd[b + "attn.proj.weight"] = randn(dim, dim, scale=dim ** -0.5)
        sd[b + "attn.proj.bias"] = torch.zeros(dim)
        sd[b + "norm2.weight"] = torch.ones(dim)
        sd[b + "norm2.bias"] = torch.zeros(dim)
        sd[b + "mlp.fc1.weight"] = randn(ratio * dim, dim, scale=dim ** -0.5)
        sd[b + "mlp.fc1.bias"] = torch.zeros(ratio * dim)
        sd[b + "mlp.fc2.weight"] = randn(dim, ratio * dim,
                                         scale=(ratio * dim) ** -0.5)
        sd[b + "mlp.fc2.bias"] = torch.zeros(dim)
    sd["norm.weight"] = torch.ones(dim)
    sd["norm.bias"] = torch.zeros(dim)
    if include_head:
        sd["head.weight"] = randn(classes, dim, scale=dim ** -0.5)
        sd["head.bias"] = torch.zeros(classes)
    return sd


def timm_to_transformers(sd, prefix="vit."):
    """Rewrite a timm state dict into the transformers naming scheme,
    splitting the fused qkv, without touching any values."""
    out = {
        prefix + "embeddings.cls_token": sd["cls_token"],
        prefix + "embeddings.position_embeddings": sd["pos_embed"],
        prefix + "embeddings.patch_embeddings.projection.weight":
            sd["patch_embed.proj.weight"],
        prefix + "embeddings.patch_embeddings.projection.bias":
            sd["patch_embed.proj.bias"],
        prefix + "layernorm.weight": sd["norm.weight"],
        prefix + "layernorm.bias": sd["norm.bias"],
        "classifier.weight": sd["head.weight"],
        "classifier.bias": sd["head.bias"],
    }
    dim = sd["cls_token"].shape[-1]
    k = 0
    while f"blocks.{k}.norm1.weight" in sd:
        src = f"blocks.{k}."
        dst = f"{prefix}encoder.layer.{k}."
        qw, qb = sd[src + "attn.qkv.weight"], sd[src + "attn.qkv.bias"]
        for i, role in enumerate(("query", "key", "value")):
            out[dst + f"attention.attention.{role}.weight"] = \
                qw[i * dim:(i + 1) * dim]
            out[dst + f"attention.attention.{role}.bias"] = \
                qb[i * dim:(i + 1) * dim]
        renames = {
            "norm1.weight": "layernorm_before.weight",
            "norm1.bias": "layernorm_before.bias",
            "attn.proj.weight": "attention.output.dense.weight",
            "attn.proj.bias": "attention.output.dense.bias",
            "norm2.weight": "layernorm_after.weight",
            "norm2.bias": "layernorm_after.bias",
            "mlp.fc1.weight": "intermediate.dense.weight",
            "mlp.fc1.bias": "intermediate.dense.bias",
            "mlp.fc2.weight": "output.dense.weight",
            "mlp.fc2.bias": "output.dense.bias",
        }
        for a, b in renames.items():
            out[dst + b] = sd[src + a]
        k += 1
    return out


def write_ppm(path, height, width, seed):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(pixels.tobytes())
    return path


@pytest.fixture(scope="session")
def engine_cli():
    path = shutil.which("cft")
    assert path, ("the engine's `cft` CLI must be on PATH for cross-checks "
                  "(install the engine package first)")
    return path


def run_engine(engine_cli, *args):
    proc = subprocess.run([engine_cli, *args], capture_output=True, text=True)
    assert proc.returncode == 0, f"cft {' '.join(args)} failed: {proc.stderr}"
    return proc.stdout


@pytest.fixture()
def small_ckpt(tmp_path):
    sd = make_timm_state_dict(seed=1)
    path = tmp_path / "small.pth"
    torch.save({"model": sd}, path)
    return path, sd
