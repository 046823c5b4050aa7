"""
Pixel-level substrate: the Image type, binary PPM I/O, area downsampling,
nearest/bilinear upsampling, blur and MSE.

Array helpers prefixed with ``block_`` / ``upsample_array`` work on float64
arrays shaped (..., H, W, C) and never round to float32, so scorers and the
tokenizer can compare results bit for bit regardless of whether a region was
processed in isolation or as part of a larger array.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from logging_config import get_logger
from quadtok.errors import ContractError, DimensionError, FormatError

logger = get_logger(__name__)

UpsampleMode = Literal["nearest", "bilinear"]
UPSAMPLE_MODES = ("nearest", "bilinear")

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


@dataclass(frozen=True, eq=False)
class Image:
    """Dense H×W×3 float32 raster with samples in [0, 1]; read-only."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise DimensionError(f"image must be H×W×3, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"image dimensions must be positive, got {data.shape[:2]}")
        if not np.all(np.isfinite(data)):
            raise DimensionError("image samples must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ContractError(f"image samples must lie in [0, 1], got [{data.min()}, {data.max()}]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)

    __hash__ = None

    @classmethod
    def from_bytes(cls, raster: np.ndarray) -> "Image":
        """Build from a uint8 H×W×3 raster."""
        return cls(np.asarray(raster, dtype=np.uint8).astype(np.float32) / np.float32(255.0))

    def to_bytes(self) -> np.ndarray:
        """Quantize to uint8 with round-half-up."""
        return quantize(self.data)


def quantize(samples: np.ndarray) -> np.ndarray:
    """round(sample × 255) with halves rounded up, clamped to [0, 255]."""
    scaled = np.floor(np.asarray(samples, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


# ========================
# PPM I/O
# ========================
def decode_ppm(payload: bytes) -> Image:
    """Decode a binary P6 PPM held in memory."""
    if not payload.startswith(b"P6"):
        raise FormatError("not a binary PPM", field="magic")
    match = _PPM_HEADER.match(payload)
    if match is None:
        raise FormatError("malformed PPM header", field="header")
    width, height, maxval = (int(group) for group in match.groups())
    if width < 1:
        raise FormatError(f"invalid width {width}", field="width")
    if height < 1:
        raise FormatError(f"invalid height {height}", field="height")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", field="maxval")

    expected = width * height * 3
    body = payload[match.end():]
    if len(body) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(body)}", field="payload")
    raster = np.frombuffer(body, dtype=np.uint8, count=expected).reshape(height, width, 3)
    return Image.from_bytes(raster)


def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.to_bytes().tobytes()


def load_ppm(path) -> Image:
    """Load a binary P6 PPM (maxval 255) as samples byte/255."""
    path = Path(path)
    img = decode_ppm(path.read_bytes())
    logger.debug("Loaded PPM", extra={"extra_fields": {"path": str(path), "height": img.height, "width": img.width}})
    return img


def save_ppm(img: Image, path) -> None:
    Path(path).write_bytes(encode_ppm(img))


# ========================
# Resampling
# ========================
def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """
    Mean over factor×factor blocks of the two axes before the last one.

    Offsets are accumulated in a fixed order with elementwise float64 adds, so
    every block mean is bitwise identical wherever the block lives.
    """
    arr = np.asarray(arr, dtype=np.float64)
    height, width = arr.shape[-3], arr.shape[-2]
    _check_divisible(height, width, factor)
    if factor == 1:
        return arr.copy()
    acc = np.zeros(arr.shape[:-3] + (height // factor, width // factor, arr.shape[-1]), dtype=np.float64)
    for dy in range(factor):
        for dx in range(factor):
            acc += arr[..., dy::factor, dx::factor, :]
    return acc / float(factor * factor)


def upsample_array(arr: np.ndarray, factor: int, mode: UpsampleMode = "bilinear") -> np.ndarray:
    """Integer-factor upsampling of the two axes before the last one."""
    if factor < 1:
        raise DimensionError(f"upsampling factor must be >= 1, got {factor}")
    arr = np.asarray(arr, dtype=np.float64)
    if factor == 1:
        return arr.copy()
    height, width = arr.shape[-3], arr.shape[-2]
    if mode == "nearest":
        return np.repeat(np.repeat(arr, factor, axis=-3), factor, axis=-2)
    if mode == "bilinear":
        return resize_bilinear(arr, height * factor, width * factor)
    raise DimensionError(f"unknown upsample mode {mode!r}")


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners-false source taps: coordinate (o + 0.5)·n_in/n_out − 0.5, clamped."""
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    lower = np.floor(coords).astype(np.intp)
    upper = np.minimum(lower + 1, n_in - 1)
    return lower, upper, coords - lower


def resize_bilinear(arr: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """
    Bilinear resize of the two axes before the last one to an arbitrary size.

    Used for integer upsampling and by the scorers' reduced-scale scoring pass.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if out_height < 1 or out_width < 1:
        raise DimensionError(f"output size must be positive, got {out_height}×{out_width}")
    lo, hi, t = _axis_weights(arr.shape[-3], out_height)
    t = t[:, None, None]
    rows = arr[..., lo, :, :] * (1.0 - t) + arr[..., hi, :, :] * t
    lo, hi, t = _axis_weights(arr.shape[-2], out_width)
    t = t[:, None]
    return rows[..., lo, :] * (1.0 - t) + rows[..., hi, :] * t


def downsample_area(img: Image, factor: int) -> Image:
    """Per-channel mean of each factor×factor block."""
    if factor < 1:
        raise DimensionError(f"downsampling factor must be >= 1, got {factor}")
    return Image(block_mean(img.data, factor))


def upsample(img: Image, factor: int, mode: UpsampleMode = "bilinear") -> Image:
    return Image(upsample_array(img.data, factor, mode))


def blur_array(arr: np.ndarray, factor: int, mode: UpsampleMode = "bilinear") -> np.ndarray:
    return upsample_array(block_mean(arr, factor), factor, mode)


def blur(img: Image, factor: int, mode: UpsampleMode = "bilinear") -> Image:
    """upsample(downsample_area(img, factor), factor, mode); same dims as input."""
    if factor < 1:
        raise DimensionError(f"blur factor must be >= 1, got {factor}")
    return Image(blur_array(img.data, factor, mode))


def mse(a, b) -> float:
    """Mean squared difference over all elements, accumulated in float64."""
    a = a.data if isinstance(a, Image) else a
    b = b.data if isinstance(b, Image) else b
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DimensionError("mse of empty arrays is undefined")
    diff = np.ascontiguousarray(a - b).ravel()
    return float(np.sum(np.square(diff)) / diff.size)


def _check_divisible(height: int, width: int, factor: int) -> None:
    if factor < 1:
        raise DimensionError(f"factor must be >= 1, got {factor}")
    if height % factor or width % factor:
        raise DimensionError(f"factor {factor} does not divide dimensions {height}×{width}")
