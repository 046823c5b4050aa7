"""
Patch saliency scorers driving the Quadtree split loop.

- pixel blur: MSE between a patch and its downsample/upsample reconstruction
- feature based: MSE between the patch's feature region computed on the
  original image and on the image blurred by s_p / s_rep
- external saliency: average pooling of a supplied pixel saliency map
"""

import json
from dataclasses import dataclass
from functools import partial
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

from config import S_REP, SCORING_SCALE, UPSAMPLE_MODE
from logging_config import get_logger
from quadtok.errors import ContractError, DimensionError, FormatError
from quadtok.extractor import FeatureExtractorSpec, FeatureMap, run_extractor
from quadtok.imagecore import Image, UpsampleMode, blur_array, block_mean, mse, resize_bilinear
from quadtok.quadtree import PatchRect, Scorer, as_patch_array, as_rects
from quadtok.tensorio import load_tensor

logger = get_logger(__name__)

ScorerKind = Literal["pixel_blur", "feature_based", "external_saliency"]


class ScorerConfig(BaseModel):
    """
    Scorer selection and parameters. ``scoring_scale`` < 1 runs the feature
    based scorer on a bilinearly reduced image; the other scorers ignore it.
    """

    model_config = ConfigDict(frozen=True)

    kind: ScorerKind = "pixel_blur"
    s_rep: PositiveInt = S_REP
    scoring_scale: float = Field(default=SCORING_SCALE, gt=0.0, le=1.0)
    upsample_mode: UpsampleMode = UPSAMPLE_MODE


@dataclass(frozen=True, eq=False)
class PatchScores:
    """Scores for candidate patches, aligned row by row with ``patches``."""

    patches: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        patches = np.array(self.patches, dtype=np.int64).reshape(-1, 3)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(patches) != len(values):
            raise ContractError(f"{len(patches)} patches but {len(values)} scores")
        if not np.all(np.isfinite(values)) or (values < 0).any():
            raise ContractError("patch scores must be finite and non-negative")
        patches.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        return (
            isinstance(other, PatchScores)
            and np.array_equal(self.patches, other.patches)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __getitem__(self, patch: PatchRect) -> float:
        return self.as_dict()[patch]

    def as_dict(self) -> dict[PatchRect, float]:
        return dict(zip(as_rects(self.patches), self.values.tolist()))

    def scaled(self, factor: float) -> "PatchScores":
        return PatchScores(self.patches, self.values * factor)

    def aligned_to(self, patches) -> np.ndarray:
        """Score values in the order of ``patches``; every patch must be scored."""
        patches = as_patch_array(patches)
        if np.array_equal(patches, self.patches):
            return self.values
        lookup = {tuple(row): v for row, v in zip(self.patches.tolist(), self.values.tolist())}
        try:
            return np.asarray([lookup[tuple(row)] for row in patches.tolist()], dtype=np.float64)
        except KeyError as e:
            raise ContractError(f"no score for candidate patch {e.args[0]}") from e

    def to_dict(self) -> dict:
        return {"patches": self.patches.tolist(), "scores": self.values.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "PatchScores":
        try:
            return cls(np.asarray(payload["patches"], dtype=np.int64), np.asarray(payload["scores"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ContractError):
                raise
            raise FormatError(f"malformed score file: {e}", field="scores") from e

    @classmethod
    def from_json(cls, text: str) -> "PatchScores":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise FormatError(f"score file is not valid JSON: {e}", field="json") from e


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Non-negative per-pixel weights, at image resolution or an integer ratio of it."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise DimensionError(f"saliency map must be H×W, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or (data < 0).any():
            raise ContractError("saliency map must be finite and non-negative")
        object.__setattr__(self, "data", data)

    @classmethod
    def load(cls, path) -> "SaliencyMap":
        return cls(load_tensor(path))


def _blur_factor(size: int, s_rep: int) -> int:
    factor, remainder = divmod(size, s_rep)
    if remainder or factor < 1:
        raise DimensionError(f"patch size {size} is not a multiple of s_rep {s_rep}")
    return factor


# ========================
# Pixel blur
# ========================
def score_pixel_blur(img: Image, candidates, cfg: ScorerConfig) -> PatchScores:
    """MSE(p, upsample(downsample(p))) with each patch blurred in isolation."""
    patches = as_patch_array(candidates)
    arr = img.data.astype(np.float64)
    values = np.empty(len(patches), dtype=np.float64)
    for size in np.unique(patches[:, 2]).tolist():
        if size <= cfg.s_rep:
            raise DimensionError(f"candidate size {size} must exceed s_rep {cfg.s_rep}")
        factor = _blur_factor(size, cfg.s_rep)
        rows = np.flatnonzero(patches[:, 2] == size)
        stack = np.stack([arr[y:y + size, x:x + size] for x, y, _ in patches[rows].tolist()])
        blurred = blur_array(stack, factor, cfg.upsample_mode)
        for i, row in enumerate(rows):
            values[row] = mse(stack[i], blurred[i])
    return PatchScores(patches, values)


# ========================
# Feature based
# ========================
def roi_slice(fm: FeatureMap, patch: PatchRect, strict: bool = True) -> np.ndarray:
    """
    Feature cells under the patch. Misaligned patches raise in strict mode;
    otherwise the slice is widened to every cell the patch touches.
    """
    r = fm.downscale_ratio
    if patch.x % r or patch.y % r or patch.size % r:
        if strict:
            raise DimensionError(f"patch {patch} is not aligned to the ×{r} feature grid")
        return fm.data[patch.y // r:-(-(patch.y + patch.size) // r), patch.x // r:-(-(patch.x + patch.size) // r)]
    return fm.data[patch.y // r:(patch.y + patch.size) // r, patch.x // r:(patch.x + patch.size) // r]


def _pool_footprint(pixel_map: np.ndarray, patch: tuple[int, int, int]) -> float:
    x, y, size = patch
    return float(np.mean(pixel_map[y:y + size, x:x + size]))


def score_from_feature_maps(
    original: FeatureMap,
    blurred: dict[int, FeatureMap],
    candidates,
    height: int,
    width: int,
) -> PatchScores:
    """
    Feature-based scores from precomputed maps: ``blurred[s]`` holds features of
    the image blurred for patch size s. Maps may come from a reduced-scale
    image, in which case their per-cell difference maps are resized back to the
    full-resolution grid before pooling.
    """
    patches = as_patch_array(candidates)
    values = np.empty(len(patches), dtype=np.float64)
    ratio = original.downscale_ratio
    full_scale = (original.height * ratio, original.width * ratio) == (height, width)
    if not full_scale and (height % ratio or width % ratio):
        raise DimensionError(f"image {height}×{width} not divisible by feature ratio {ratio}")

    for size in np.unique(patches[:, 2]).tolist():
        if size not in blurred:
            raise ContractError(f"no blurred feature map for patch size {size}")
        features = blurred[size]
        if features.data.shape != original.data.shape:
            raise DimensionError(f"blurred features for size {size} have shape {features.data.shape}")
        rows = np.flatnonzero(patches[:, 2] == size)
        aligned = full_scale and not (patches[rows] % ratio).any()
        if aligned:
            for row in rows:
                rect = PatchRect(*patches[row].tolist())
                values[row] = mse(roi_slice(features, rect), roi_slice(original, rect))
            continue

        cell_map = np.mean(np.square(features.data - original.data), axis=2)
        if not full_scale:
            cell_map = resize_bilinear(cell_map[:, :, None], height // ratio, width // ratio)[:, :, 0]
        pixel_map = np.repeat(np.repeat(cell_map, ratio, axis=0), ratio, axis=1)
        for row in rows:
            values[row] = _pool_footprint(pixel_map, patches[row].tolist())
    return PatchScores(patches, values)


def _scaled_dims(height: int, width: int, scale: float) -> tuple[int, int]:
    scaled = (round(height * scale), round(width * scale))
    if abs(scaled[0] - height * scale) > 1e-9 or abs(scaled[1] - width * scale) > 1e-9:
        raise DimensionError(f"scoring scale {scale} does not map {height}×{width} to whole pixels")
    return scaled


def feature_maps_for(img: Image, sizes, spec: FeatureExtractorSpec, cfg: ScorerConfig):
    """One pass on the (optionally reduced) image plus one per distinct patch size."""
    arr = img.data.astype(np.float64)
    if cfg.scoring_scale < 1.0:
        arr = resize_bilinear(arr, *_scaled_dims(img.height, img.width, cfg.scoring_scale))
    ratio = spec.downscale_ratio
    original = FeatureMap(run_extractor(arr, spec), ratio)
    blurred = {}
    for size in sorted(set(sizes), reverse=True):
        factor = _blur_factor(size, cfg.s_rep)
        blurred[size] = FeatureMap(run_extractor(blur_array(arr, factor, cfg.upsample_mode), spec), ratio)
    logger.debug(
        "Computed feature maps",
        extra={"extra_fields": {"forward_passes": 1 + len(blurred), "grid": [original.height, original.width]}},
    )
    return original, blurred


def score_feature_based(img: Image, candidates, spec: FeatureExtractorSpec, cfg: ScorerConfig) -> PatchScores:
    """MSE(feat(blur(im, s_p / s_rep))[p], feat(im)[p]) for every candidate p."""
    patches = as_patch_array(candidates)
    original, blurred = feature_maps_for(img, patches[:, 2].tolist(), spec, cfg)
    return score_from_feature_maps(original, blurred, patches, img.height, img.width)


# ========================
# External saliency
# ========================
def score_from_saliency_map(saliency: SaliencyMap, candidates, height: int | None = None,
                            width: int | None = None) -> PatchScores:
    """Mean of the saliency map over each patch's pixel footprint."""
    patches = as_patch_array(candidates)
    data = saliency.data
    height = data.shape[0] if height is None else height
    width = data.shape[1] if width is None else width
    map_h, map_w = data.shape
    if (map_h, map_w) != (height, width):
        if height % map_h == 0 and width % map_w == 0 and height // map_h == width // map_w:
            ratio = height // map_h
            data = np.repeat(np.repeat(data, ratio, axis=0), ratio, axis=1)
        elif map_h % height == 0 and map_w % width == 0 and map_h // height == map_w // width:
            data = block_mean(data[:, :, None], map_h // height)[:, :, 0]
        else:
            raise DimensionError(f"saliency map {map_h}×{map_w} has no integer ratio to image {height}×{width}")
    values = np.asarray([_pool_footprint(data, row) for row in patches.tolist()], dtype=np.float64)
    return PatchScores(patches, values)


def make_scorer(
    cfg: ScorerConfig,
    extractor: FeatureExtractorSpec | None = None,
    saliency: SaliencyMap | None = None,
) -> Scorer:
    """Bind a scorer to its configuration and external inputs."""
    if cfg.kind == "pixel_blur":
        return partial(score_pixel_blur, cfg=cfg)
    if cfg.kind == "feature_based":
        if extractor is None:
            raise ContractError("the feature-based scorer requires a feature extractor")
        return partial(score_feature_based, spec=extractor, cfg=cfg)
    if saliency is None:
        raise ContractError("the external-saliency scorer requires a saliency map")

    def score_saliency(img: Image, candidates) -> PatchScores:
        return score_from_saliency_map(saliency, candidates, img.height, img.width)

    return score_saliency
