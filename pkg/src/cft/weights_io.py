"""Binary weight container (magic "CFT1") and a seeded synthetic generator.

The format is fully canonical: tensors appear in one fixed order, payload
offsets are the running sum of tensor sizes, and every shape is pinned by the
config block, so any stray or altered byte is detectable at load time. The
byte layout is documented in docs/cft1-format.md.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import WeightFormatError
from .model import EncoderWeights, ModelWeights
from .reuse import ReuseWeights
from .tensor import DenseTensor

MAGIC = b"CFT1"
FORMAT_VERSION = 1
SOURCE_FIELD_BYTES = 16
SYNTHETIC_SOURCE = "synthetic-pcg64"

_HEADER = struct.Struct("<4sI16s9I2f")  # magic, version, source, config ints, alpha, beta

_ENCODER_FIELDS = (
    "norm1.gain", "norm1.bias", "qkv.weight", "qkv.bias",
    "attn_out.weight", "attn_out.bias", "norm2.gain", "norm2.bias",
    "ffn_in.weight", "ffn_in.bias", "ffn_out.weight", "ffn_out.bias",
)
_REUSE_FIELDS = (
    "norm.gain", "norm.bias", "mlp_in.weight", "mlp_in.bias",
    "mlp_out.weight", "mlp_out.bias",
)
_HEAD_FIELDS = ("norm.gain", "norm.bias", "linear.weight", "linear.bias")


def tensor_entries(cfg: ModelConfig, reuse_hidden: int) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Canonical (name, shape) sequence for a config.

    Linear weights are stored [fan_in, fan_out] so application is x @ W + b;
    the qkv weight's output columns are ordered q | k | v.
    """
    d, r = cfg.embed_dim, cfg.mlp_ratio
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("patch_proj.weight", (cfg.patch_inputs, d)),
        ("patch_proj.bias", (d,)),
        ("class_token", (d,)),
        ("pos_table", (1 + cfg.n_fine_full, d)),
    ]
    enc_shapes = {
        "norm1.gain": (d,), "norm1.bias": (d,),
        "qkv.weight": (d, 3 * d), "qkv.bias": (3 * d,),
        "attn_out.weight": (d, d), "attn_out.bias": (d,),
        "norm2.gain": (d,), "norm2.bias": (d,),
        "ffn_in.weight": (d, r * d), "ffn_in.bias": (r * d,),
        "ffn_out.weight": (r * d, d), "ffn_out.bias": (d,),
    }
    for k in range(cfg.depth):
        entries.extend((f"encoder.{k}.{f}", enc_shapes[f]) for f in _ENCODER_FIELDS)
    reuse_shapes = {
        "norm.gain": (d,), "norm.bias": (d,),
        "mlp_in.weight": (d, reuse_hidden), "mlp_in.bias": (reuse_hidden,),
        "mlp_out.weight": (reuse_hidden, d), "mlp_out.bias": (d,),
    }
    entries.extend((f"reuse.{f}", reuse_shapes[f]) for f in _REUSE_FIELDS)
    head_shapes = {
        "norm.gain": (d,), "norm.bias": (d,),
        "linear.weight": (d, cfg.num_classes), "linear.bias": (cfg.num_classes,),
    }
    entries.extend((f"head.{f}", head_shapes[f]) for f in _HEAD_FIELDS)
    return tuple(entries)


def _flatten_weights(w: ModelWeights) -> dict[str, DenseTensor]:
    out = {
        "patch_proj.weight": w.patch_proj_weight,
        "patch_proj.bias": w.patch_proj_bias,
        "class_token": w.class_token,
        "pos_table": w.pos_table,
    }
    for k, enc in enumerate(w.encoders):
        out[f"encoder.{k}.norm1.gain"] = enc.norm1_gain
        out[f"encoder.{k}.norm1.bias"] = enc.norm1_bias
        out[f"encoder.{k}.qkv.weight"] = enc.qkv_weight
        out[f"encoder.{k}.qkv.bias"] = enc.qkv_bias
        out[f"encoder.{k}.attn_out.weight"] = enc.attn_out_weight
        out[f"encoder.{k}.attn_out.bias"] = enc.attn_out_bias
        out[f"encoder.{k}.norm2.gain"] = enc.norm2_gain
        out[f"encoder.{k}.norm2.bias"] = enc.norm2_bias
        out[f"encoder.{k}.ffn_in.weight"] = enc.ffn_in_weight
        out[f"encoder.{k}.ffn_in.bias"] = enc.ffn_in_bias
        out[f"encoder.{k}.ffn_out.weight"] = enc.ffn_out_weight
        out[f"encoder.{k}.ffn_out.bias"] = enc.ffn_out_bias
    out["reuse.norm.gain"] = w.reuse.norm_gain
    out["reuse.norm.bias"] = w.reuse.norm_bias
    out["reuse.mlp_in.weight"] = w.reuse.mlp_in_weight
    out["reuse.mlp_in.bias"] = w.reuse.mlp_in_bias
    out["reuse.mlp_out.weight"] = w.reuse.mlp_out_weight
    out["reuse.mlp_out.bias"] = w.reuse.mlp_out_bias
    out["head.norm.gain"] = w.head_norm_gain
    out["head.norm.bias"] = w.head_norm_bias
    out["head.linear.weight"] = w.head_weight
    out["head.linear.bias"] = w.head_bias
    return out


def _assemble_weights(tensors: dict[str, DenseTensor], cfg: ModelConfig) -> ModelWeights:
    def enc(k: int) -> EncoderWeights:
        g = lambda f: tensors[f"encoder.{k}.{f}"]  # noqa: E731
        return EncoderWeights(
            norm1_gain=g("norm1.gain"), norm1_bias=g("norm1.bias"),
            qkv_weight=g("qkv.weight"), qkv_bias=g("qkv.bias"),
            attn_out_weight=g("attn_out.weight"), attn_out_bias=g("attn_out.bias"),
            norm2_gain=g("norm2.gain"), norm2_bias=g("norm2.bias"),
            ffn_in_weight=g("ffn_in.weight"), ffn_in_bias=g("ffn_in.bias"),
            ffn_out_weight=g("ffn_out.weight"), ffn_out_bias=g("ffn_out.bias"),
        )

    return ModelWeights(
        patch_proj_weight=tensors["patch_proj.weight"],
        patch_proj_bias=tensors["patch_proj.bias"],
        class_token=tensors["class_token"],
        pos_table=tensors["pos_table"],
        encoders=tuple(enc(k) for k in range(cfg.depth)),
        reuse=ReuseWeights(
            norm_gain=tensors["reuse.norm.gain"],
            norm_bias=tensors["reuse.norm.bias"],
            mlp_in_weight=tensors["reuse.mlp_in.weight"],
            mlp_in_bias=tensors["reuse.mlp_in.bias"],
            mlp_out_weight=tensors["reuse.mlp_out.weight"],
            mlp_out_bias=tensors["reuse.mlp_out.bias"],
        ),
        head_norm_gain=tensors["head.norm.gain"],
        head_norm_bias=tensors["head.norm.bias"],
        head_weight=tensors["head.linear.weight"],
        head_bias=tensors["head.linear.bias"],
    )


def _pack_header(cfg: ModelConfig, source: str) -> bytes:
    raw = source.encode("ascii")
    if len(raw) > SOURCE_FIELD_BYTES:
        raise WeightFormatError(
            f"source tag longer than {SOURCE_FIELD_BYTES} bytes: {source!r}"
        )
    return _HEADER.pack(
        MAGIC, FORMAT_VERSION, raw.ljust(SOURCE_FIELD_BYTES, b"\0"),
        cfg.coarse_grid, cfg.fine_grid, cfg.patch_px, cfg.embed_dim,
        cfg.depth, cfg.heads, cfg.num_classes, cfg.ema_start, cfg.mlp_ratio,
        cfg.alpha, cfg.beta,
    )


def save_weights(w: ModelWeights, cfg: ModelConfig, path: str | Path,
                 source: str = "exported") -> None:
    """Serialize to the canonical container; refuses inconsistent shapes."""
    w.validate(cfg)
    tensors = _flatten_weights(w)
    entries = tensor_entries(cfg, w.reuse.hidden_dim)

    directory = bytearray()
    dir_size = 0
    for name, shape in entries:
        dir_size += 2 + len(name.encode()) + 4 + 4 * len(shape) + 8
    offset = _HEADER.size + 4 + dir_size
    for name, shape in entries:
        raw = name.encode()
        directory += struct.pack(f"<H{len(raw)}sI{len(shape)}IQ",
                                 len(raw), raw, len(shape), *shape, offset)
        offset += 4 * int(np.prod(shape))

    with open(path, "wb") as fh:
        fh.write(_pack_header(cfg, source))
        fh.write(struct.pack("<I", len(entries)))
        fh.write(directory)
        for name, _ in entries:
            fh.write(tensors[name].array.tobytes())


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.at = 0

    def take(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        if self.at + s.size > len(self.blob):
            raise WeightFormatError(
                f"truncated container: {what} needs {s.size} bytes at offset "
                f"{self.at}, file has {len(self.blob)}"
            )
        vals = s.unpack_from(self.blob, self.at)
        self.at += s.size
        return vals


def load_weights(path: str | Path) -> tuple[ModelWeights, ModelConfig]:
    """Parse and fully validate a container; every byte is accounted for."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    (magic, version, source_raw, coarse_grid, fine_grid, patch_px, embed_dim,
     depth, heads, num_classes, ema_start, mlp_ratio, alpha, beta) = r.take(
        "<4sI16s9I2f", "header")
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    try:
        source_raw.rstrip(b"\0").decode("ascii")
    except UnicodeDecodeError as exc:
        raise WeightFormatError("source tag is not ASCII") from exc
    if fine_grid != 2 * coarse_grid:
        raise WeightFormatError(
            f"config block inconsistent: fine grid {fine_grid} "
            f"is not twice coarse grid {coarse_grid}"
        )
    cfg = ModelConfig(
        coarse_grid=coarse_grid, patch_px=patch_px, embed_dim=embed_dim,
        depth=depth, heads=heads, num_classes=num_classes,
        alpha=float(alpha), beta=float(beta), ema_start=ema_start,
        mlp_ratio=mlp_ratio,
    )

    (count,) = r.take("<I", "tensor count")
    parsed: list[tuple[str, tuple[int, ...], int]] = []
    for i in range(count):
        (name_len,) = r.take("<H", f"directory entry {i} name length")
        (raw_name,) = r.take(f"<{name_len}s", f"directory entry {i} name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"directory entry {i}: name is not UTF-8") from exc
        (rank,) = r.take("<I", f"directory entry {i} ({name}) rank")
        if rank == 0 or rank > 8:
            raise WeightFormatError(f"tensor {name}: implausible rank {rank}")
        shape = r.take(f"<{rank}I", f"directory entry {i} ({name}) extents")
        (offset,) = r.take("<Q", f"directory entry {i} ({name}) offset")
        parsed.append((name, tuple(shape), offset))

    names = [p[0] for p in parsed]
    reuse_hidden = _reuse_hidden_from_directory(parsed, embed_dim)
    expected = tensor_entries(cfg, reuse_hidden)
    if len(parsed) != len(expected):
        raise WeightFormatError(
            f"directory holds {len(parsed)} tensors, config requires {len(expected)}"
        )
    expected_names = [e[0] for e in expected]
    if names != expected_names:
        for got, want in zip(names, expected_names):
            if got != want:
                raise WeightFormatError(
                    f"unexpected tensor {got!r} where {want!r} belongs"
                )
    running = r.at
    for (name, shape, offset), (_, want_shape) in zip(parsed, expected):
        if shape != want_shape:
            raise WeightFormatError(
                f"tensor {name}: shape {shape} does not match config "
                f"requirement {want_shape}"
            )
        if offset != running:
            raise WeightFormatError(
                f"tensor {name}: payload offset {offset} breaks the canonical "
                f"layout (expected {running})"
            )
        running += 4 * int(np.prod(shape))
    if running != len(blob):
        raise WeightFormatError(
            f"payload ends at {running} but file has {len(blob)} bytes"
        )

    tensors: dict[str, DenseTensor] = {}
    for name, shape, offset in parsed:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        tensors[name] = DenseTensor(arr.reshape(shape))
    weights = _assemble_weights(tensors, cfg)
    weights.validate(cfg)
    return weights, cfg


def read_source_tag(path: str | Path) -> str:
    """Provenance tag from a container header without loading payloads."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise WeightFormatError(f"{path} is not a weight container")
    return head[8:8 + SOURCE_FIELD_BYTES].rstrip(b"\0").decode("ascii")


def _reuse_hidden_from_directory(parsed, embed_dim: int) -> int:
    for name, shape, _ in parsed:
        if name == "reuse.mlp_in.weight":
            if len(shape) != 2 or shape[0] != embed_dim or shape[1] < 1:
                raise WeightFormatError(
                    f"reuse.mlp_in.weight shape {shape} incompatible with "
                    f"embed dim {embed_dim}"
                )
            return shape[1]
    raise WeightFormatError("reuse.mlp_in.weight missing from directory")


def generate_synthetic(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic random weights for desk-scale runs.

    One PCG64 stream seeded once fills tensors in canonical container order:
    linear weights draw normal scaled by 1/sqrt(fan_in), biases are zero,
    norm gains are one, and the class token and positional table draw
    normal scaled by 0.02. Same seed and config always give identical bytes.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    tensors: dict[str, DenseTensor] = {}
    for name, shape in tensor_entries(cfg, reuse_hidden=cfg.embed_dim):
        leaf = name.rsplit(".", 1)[-1]
        if name in ("class_token", "pos_table"):
            arr = rng.standard_normal(shape) * 0.02
        elif leaf == "weight":
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif leaf == "gain":
            arr = np.ones(shape)
        else:  # all biases
            arr = np.zeros(shape)
        tensors[name] = DenseTensor(np.asarray(arr, dtype=np.float32))
    return _assemble_weights(tensors, cfg)
