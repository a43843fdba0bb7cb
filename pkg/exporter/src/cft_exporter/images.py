"""Readers for the two image formats the engine accepts (binary PPM and the
CFTI raw-float container), with the same standardization it applies.

Reimplemented from the format documentation rather than imported: the
exporter's contract with the engine is files, not code.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ExportError

MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def _ppm_tokens(blob: bytes):
    """Header tokens of a PPM file, skipping '#' comments."""
    at = 0
    while True:
        while at < len(blob) and blob[at:at + 1].isspace():
            at += 1
        if at < len(blob) and blob[at:at + 1] == b"#":
            while at < len(blob) and blob[at] != 0x0A:
                at += 1
            continue
        start = at
        while at < len(blob) and not blob[at:at + 1].isspace():
            at += 1
        if start == at:
            raise ExportError("truncated PPM header")
        yield blob[start:at], at + 1


def _read_ppm(blob: bytes) -> np.ndarray:
    tokens = _ppm_tokens(blob)
    magic, _ = next(tokens)
    if magic != b"P6":
        raise ExportError(f"unsupported PPM magic {magic!r}")
    try:
        width, _ = next(tokens)
        height, _ = next(tokens)
        maxval, after = next(tokens)
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ExportError("non-numeric PPM header field") from exc
    if maxval != 255:
        raise ExportError(f"only maxval 255 PPMs are supported, got {maxval}")
    need = 3 * width * height
    pixels = blob[after:after + need]
    if len(pixels) != need:
        raise ExportError("PPM pixel data truncated")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _read_cfti(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise ExportError("CFTI header truncated")
    channels, height, width = np.frombuffer(blob, dtype="<u4", count=3, offset=4)
    if channels != 3:
        raise ExportError(f"CFTI must hold 3 channels, got {channels}")
    need = int(channels) * int(height) * int(width)
    values = np.frombuffer(blob, dtype="<f4", offset=16)
    if values.size != need:
        raise ExportError(
            f"CFTI payload holds {values.size} values, header promises {need}"
        )
    return values.reshape(3, int(height), int(width)).copy()


def load_standardized(path: str | Path) -> np.ndarray:
    """(3, H, W) float32 tensor, standardized exactly as the engine does."""
    blob = Path(path).read_bytes()
    if blob[:2] == b"P6":
        image = _read_ppm(blob)
    elif blob[:4] == b"CFTI":
        image = _read_cfti(blob)
    else:
        raise ExportError(f"unrecognized image format in {path}")
    for c in range(3):
        image[c] = (image[c] - MEAN[c]) / STD[c]
    return image
