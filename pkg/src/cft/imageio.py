"""Image input: binary PPM (P6, maxval 255) and raw float32 tensors with a
16-byte "CFTI" header. Both are decoded to [0, 1] intensities and then
per-channel standardized; no external image decoder is involved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ImageFormatError
from .tensor import DenseTensor

IMAGE_MAGIC = b"CFTI"

# Per-channel standardization constants shared across the common ImageNet
# model zoo; override with the CLI's --mean/--std when a checkpoint differs.
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


def _read_ppm(blob: bytes, path: Path) -> np.ndarray:
    # Header tokens (P6, width, height, maxval) separated by whitespace,
    # with '#' comments allowed between them; pixel bytes follow the single
    # whitespace after maxval.
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            if blob[pos:pos + 1].isspace():
                pos += 1
            elif blob[pos:pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        return blob[start:pos]

    if next_token() != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    try:
        width, height, maxval = (int(next_token()) for _ in range(3))
    except ValueError as exc:
        raise ImageFormatError(f"{path}: non-numeric PPM header field") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # the single whitespace byte after maxval
    need = width * height * 3
    data = blob[pos:pos + need]
    if len(data) < need:
        raise ImageFormatError(
            f"{path}: pixel data truncated ({len(data)} of {need} bytes)"
        )
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _read_raw(blob: bytes, path: Path) -> np.ndarray:
    if len(blob) < 16:
        raise ImageFormatError(f"{path}: raw tensor header needs 16 bytes")
    channels, height, width = struct.unpack_from("<3I", blob, 4)
    if channels != 3:
        raise ImageFormatError(f"{path}: expected 3 channels, got {channels}")
    need = 16 + 4 * channels * height * width
    if len(blob) != need:
        raise ImageFormatError(
            f"{path}: payload is {len(blob) - 16} bytes, header promises {need - 16}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=16)
    return values.reshape(channels, height, width).copy()


def load_image(
    path: str | Path,
    mean: tuple[float, float, float] = DEFAULT_MEAN,
    std: tuple[float, float, float] = DEFAULT_STD,
    standardize: bool = True,
) -> DenseTensor:
    """Decode a PPM or raw tensor file to a standardized [3, H, W] tensor."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == b"P6":
        image = _read_ppm(blob, path)
    elif blob[:4] == IMAGE_MAGIC:
        image = _read_raw(blob, path)
    else:
        raise ImageFormatError(
            f"{path}: unrecognized image format (expected PPM P6 or CFTI raw)"
        )
    if standardize:
        for c in range(3):
            if std[c] == 0:
                raise ImageFormatError("standardization std must be nonzero")
            image[c] = (image[c] - mean[c]) / std[c]
    return DenseTensor(image)


def save_raw_image(values: np.ndarray, path: str | Path) -> None:
    """Write [0, 1] intensities as a CFTI raw tensor (testing aid)."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"raw image must be [3, H, W], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def save_ppm(pixels: np.ndarray, path: str | Path) -> None:
    """Write uint8 [H, W, 3] pixels as binary PPM (testing aid)."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"PPM pixels must be [H, W, 3], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())
