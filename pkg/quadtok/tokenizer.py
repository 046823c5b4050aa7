"""
Mosaic -> token sequence: fixed-size patch representations, a shared linear
patch embedding and concatenated 2D sinusoidal position embeddings.
"""

import json
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from einops import rearrange
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from config import D_MODEL, POS_TEMPERATURE, S_MIN, S_REP
from logging_config import get_logger
from quadtok.errors import ContractError, DimensionError, FormatError
from quadtok.imagecore import Image, block_mean, resize_bilinear
from quadtok.initializers import seeded_generator, xavier_uniform
from quadtok.quadtree import PatchMosaic, PatchRect, zkeys
from quadtok.tensorio import load_bundle, save_bundle

logger = get_logger(__name__)


class TokenizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    s_rep: PositiveInt = S_REP
    d_model: PositiveInt = D_MODEL
    s_min: PositiveInt = S_MIN
    pos_temperature: PositiveFloat = POS_TEMPERATURE

    @model_validator(mode="after")
    def _check_d_model(self):
        if self.d_model % 4:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by 4")
        return self

    @property
    def rep_length(self) -> int:
        return 3 * self.s_rep * self.s_rep


@dataclass(frozen=True, eq=False)
class Token:
    """One patch: flattened representation, center in s_min cells, source geometry."""

    rep: np.ndarray
    center: tuple[float, float]
    size: int
    x: int
    y: int


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: tuple[Token, ...]
    config: TokenizerConfig

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def reps(self) -> np.ndarray:
        return np.stack([t.rep for t in self.tokens])

    @property
    def centers(self) -> np.ndarray:
        return np.asarray([t.center for t in self.tokens], dtype=np.float64).reshape(-1, 2)

    def sidecar(self) -> dict:
        """Per-token metadata written next to the token tensor."""
        return {
            "config": self.config.model_dump(),
            "tokens": [
                {"x": t.x, "y": t.y, "size": t.size, "cx": t.center[0], "cy": t.center[1]} for t in self.tokens
            ],
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), sort_keys=True)


def parse_sidecar(text: str) -> tuple[TokenizerConfig, list[dict]]:
    try:
        payload = json.loads(text)
        config = TokenizerConfig.model_validate(payload["config"])
        tokens = [
            {"x": int(t["x"]), "y": int(t["y"]), "size": int(t["size"]), "cx": float(t["cx"]), "cy": float(t["cy"])}
            for t in payload["tokens"]
        ]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed token sidecar: {e}", field="tokens") from e
    return config, tokens


@dataclass(frozen=True, eq=False)
class PatchEmbedder:
    """Shared fully connected layer: weight (d_model, 3·s_rep²), bias (d_model,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"embedder shapes inconsistent: weight {weight.shape}, bias {bias.shape}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ContractError("embedder weights must be finite")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def d_model(self) -> int:
        return self.weight.shape[0]

    @property
    def rep_length(self) -> int:
        return self.weight.shape[1]

    def check(self, cfg: TokenizerConfig) -> None:
        if (self.d_model, self.rep_length) != (cfg.d_model, cfg.rep_length):
            raise DimensionError(
                f"embedder is {self.d_model}×{self.rep_length}, config needs {cfg.d_model}×{cfg.rep_length}"
            )

    @classmethod
    def initialize(cls, cfg: TokenizerConfig, seed: int) -> "PatchEmbedder":
        rng = seeded_generator(seed)
        weight = xavier_uniform(rng, (cfg.d_model, cfg.rep_length), cfg.rep_length, cfg.d_model)
        return cls(weight, np.zeros(cfg.d_model))

    def save(self, directory):
        return save_bundle(directory, {"weight": self.weight, "bias": self.bias}, {"kind": "patch_embedder"})

    @classmethod
    def load(cls, directory) -> "PatchEmbedder":
        tensors, metadata = load_bundle(directory)
        if metadata.get("kind") != "patch_embedder" or set(tensors) != {"weight", "bias"}:
            raise FormatError(f"{directory} is not a patch embedder bundle", field="kind")
        return cls(tensors["weight"], tensors["bias"])


# ========================
# Representations and positions
# ========================
def patch_to_representation(img: Image, patch: PatchRect, s_rep: int) -> np.ndarray:
    """Area-downsample the patch to s_rep×s_rep and flatten channel-interleaved."""
    factor, remainder = divmod(patch.size, s_rep)
    if remainder or factor < 1:
        raise DimensionError(f"patch size {patch.size} is not a multiple of s_rep {s_rep}")
    region = img.data[patch.y:patch.y + patch.size, patch.x:patch.x + patch.size]
    if region.shape[:2] != (patch.size, patch.size):
        raise DimensionError(f"patch {patch} extends outside the image")
    return block_mean(region, factor).reshape(-1)


def _representations(img: Image, patches: np.ndarray, s_rep: int) -> np.ndarray:
    """Batched ``patch_to_representation``, grouped by patch size."""
    reps = np.empty((len(patches), 3 * s_rep * s_rep), dtype=np.float64)
    for size in np.unique(patches[:, 2]).tolist():
        factor, remainder = divmod(size, s_rep)
        if remainder or factor < 1:
            raise DimensionError(f"patch size {size} is not a multiple of s_rep {s_rep}")
        rows = np.flatnonzero(patches[:, 2] == size)
        stack = np.stack([img.data[y:y + size, x:x + size] for x, y, _ in patches[rows].tolist()])
        reps[rows] = rearrange(block_mean(stack, factor), "n h w c -> n (h w c)")
    return reps


def patch_center(patch: PatchRect, s_min: int) -> tuple[float, float]:
    """Center in units of s_min cells."""
    return ((patch.x + patch.size / 2) / s_min, (patch.y + patch.size / 2) / s_min)


def _frequencies(d_model: int, temperature: float) -> np.ndarray:
    if d_model % 4 or d_model < 4:
        raise DimensionError(f"d_model ({d_model}) must be a positive multiple of 4")
    return temperature ** (-4.0 * np.arange(d_model // 4, dtype=np.float64) / d_model)


def position_embeddings(centers: np.ndarray, d_model: int, temperature: float = POS_TEMPERATURE) -> np.ndarray:
    """(L, 2) centers -> (L, d_model): [sin/cos interleaved x-half | y-half]."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    angles = centers[:, :, None] * _frequencies(d_model, temperature)  # (L, 2, d/4)
    pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (L, 2, d/4, 2)
    return rearrange(pairs, "l ax f pair -> l (ax f pair)")


def position_embedding_2d(cx: float, cy: float, d_model: int, temperature: float = POS_TEMPERATURE) -> np.ndarray:
    return position_embeddings(np.asarray([[cx, cy]]), d_model, temperature)[0]


# ========================
# Tokenization
# ========================
def build_sequence(img: Image, mosaic: PatchMosaic, cfg: TokenizerConfig) -> TokenSequence:
    if (img.height, img.width) != (mosaic.image_height, mosaic.image_width):
        raise DimensionError(
            f"mosaic is for {mosaic.image_height}×{mosaic.image_width}, image is {img.height}×{img.width}"
        )
    reps = _representations(img, mosaic.patches, cfg.s_rep)
    tokens = []
    for rep, (x, y, size) in zip(reps, mosaic.patches.tolist()):
        rect = PatchRect(x, y, size)
        tokens.append(Token(rep, patch_center(rect, cfg.s_min), size, x, y))
    return TokenSequence(tuple(tokens), cfg)


def embed_tokens(seq: TokenSequence, embedder: PatchEmbedder) -> np.ndarray:
    """W·rep + b + pos(cx, cy) for every token; (L, d_model)."""
    embedder.check(seq.config)
    projected = seq.reps @ embedder.weight.T + embedder.bias
    return projected + position_embeddings(seq.centers, seq.config.d_model, seq.config.pos_temperature)


def tokenize(img: Image, mosaic: PatchMosaic, embedder: PatchEmbedder,
             cfg: TokenizerConfig) -> tuple[np.ndarray, TokenSequence]:
    seq = build_sequence(img, mosaic, cfg)
    return embed_tokens(seq, embedder), seq


def scale_positions(seq: TokenSequence, train_grid: tuple[float, float],
                    infer_grid: tuple[float, float]) -> TokenSequence:
    """Rescale centers so an inference grid maps onto the training grid's range."""
    if min(train_grid) <= 0 or min(infer_grid) <= 0:
        raise ContractError(f"grids must be positive, got train {train_grid} and infer {infer_grid}")
    sx = train_grid[0] / infer_grid[0]
    sy = train_grid[1] / infer_grid[1]
    tokens = tuple(replace(t, center=(t.center[0] * sx, t.center[1] * sy)) for t in seq.tokens)
    return TokenSequence(tokens, seq.config)


# ========================
# Uniform-grid baseline
# ========================
def resize_for_patch_count(img: Image, num_patches: int, patch_size: int) -> Image:
    """Bilinear resize to (patch_size·√L)², the vanilla way of choosing L."""
    side = math.isqrt(num_patches)
    if side * side != num_patches:
        raise ContractError(f"{num_patches} is not a square patch count")
    return Image(np.clip(resize_bilinear(img.data, side * patch_size, side * patch_size), 0.0, 1.0))


def uniform_grid_tokenize(
    img: Image,
    embedder: PatchEmbedder,
    cfg: TokenizerConfig,
    order: Literal["raster", "zorder"] = "raster",
) -> tuple[np.ndarray, TokenSequence]:
    """Vanilla tokenization on an s_rep grid with no resizing."""
    p = cfg.s_rep
    if img.height % p or img.width % p:
        raise DimensionError(f"patch size {p} does not divide image {img.height}×{img.width}")
    grid_w = img.width // p
    reps = rearrange(img.data.astype(np.float64), "(gh p1) (gw p2) c -> (gh gw) (p1 p2 c)", p1=p, p2=p)
    cells = np.arange(len(reps))
    patches = np.stack([(cells % grid_w) * p, (cells // grid_w) * p, np.full(len(reps), p)], axis=1)
    if order == "zorder":
        perm = np.argsort(zkeys(patches), kind="stable")
        reps, patches = reps[perm], patches[perm]
    tokens = tuple(
        Token(rep, patch_center(PatchRect(x, y, s), cfg.s_min), s, x, y)
        for rep, (x, y, s) in zip(reps, patches.tolist())
    )
    seq = TokenSequence(tokens, cfg)
    return embed_tokens(seq, embedder), seq
