"""
Visualizations: mosaics rendered the way the tokenizer sees them, and
per-size score heatmaps.
"""

import re

import numpy as np

from config import S_REP
from logging_config import get_logger
from quadtok.errors import DimensionError, FormatError
from quadtok.imagecore import Image, UpsampleMode, block_mean, upsample_array
from quadtok.quadtree import PatchMosaic
from quadtok.scorers import PatchScores

logger = get_logger(__name__)

Color = tuple[int, int, int]

_NAMED_COLORS: dict[str, Color] = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "yellow": (255, 255, 0),
}


def parse_color(text: str) -> Color:
    """``#rrggbb``, ``r,g,b`` or one of a few names."""
    text = text.strip().lower()
    if text in _NAMED_COLORS:
        return _NAMED_COLORS[text]
    if re.fullmatch(r"#?[0-9a-f]{6}", text):
        value = text.lstrip("#")
        return tuple(int(value[i:i + 2], 16) for i in (0, 2, 4))
    parts = text.split(",")
    if len(parts) == 3 and all(p.strip().isdigit() and int(p) <= 255 for p in parts):
        return tuple(int(p) for p in parts)
    raise FormatError(f"unrecognised color {text!r}", field="color")


def render_mosaic(
    img: Image,
    mosaic: PatchMosaic,
    s_rep: int = S_REP,
    mode: UpsampleMode = "nearest",
    grid: Color | None = None,
) -> Image:
    """Replace each patch by its s_rep representation upsampled back to size."""
    if (img.height, img.width) != (mosaic.image_height, mosaic.image_width):
        raise DimensionError(
            f"mosaic is for {mosaic.image_height}×{mosaic.image_width}, image is {img.height}×{img.width}"
        )
    out = np.array(img.data, dtype=np.float64)
    for x, y, size in mosaic.patches.tolist():
        factor, remainder = divmod(size, s_rep)
        if remainder or factor < 1:
            raise DimensionError(f"patch size {size} is not a multiple of s_rep {s_rep}")
        if factor == 1:
            continue
        region = out[y:y + size, x:x + size]
        out[y:y + size, x:x + size] = upsample_array(block_mean(region, factor), factor, mode)
    if grid is not None:
        color = np.asarray(grid, dtype=np.float64) / 255.0
        for x, y, size in mosaic.patches.tolist():
            out[y, x:x + size] = color
            out[y + size - 1, x:x + size] = color
            out[y:y + size, x] = color
            out[y:y + size, x + size - 1] = color
    return Image(np.clip(out, 0.0, 1.0))


def score_heatmaps(scores: PatchScores, height: int, width: int) -> dict[int, Image]:
    """
    One grayscale image per candidate size; each candidate is filled with its
    score min-max normalized within that size (all zero when constant).
    """
    heatmaps = {}
    patches, values = scores.patches, scores.values
    for size in sorted(np.unique(patches[:, 2]).tolist(), reverse=True):
        rows = np.flatnonzero(patches[:, 2] == size)
        level = values[rows]
        span = level.max() - level.min()
        normalized = (level - level.min()) / span if span > 0 else np.zeros_like(level)
        canvas = np.zeros((height, width), dtype=np.float64)
        for (x, y, s), value in zip(patches[rows].tolist(), normalized.tolist()):
            if x + s > width or y + s > height:
                raise DimensionError(f"candidate ({x}, {y}, {s}) lies outside {height}×{width}")
            canvas[y:y + s, x:x + s] = value
        heatmaps[size] = Image(np.repeat(canvas[:, :, None], 3, axis=2))
    logger.debug("Rendered score heatmaps", extra={"extra_fields": {"sizes": sorted(heatmaps)}})
    return heatmaps
