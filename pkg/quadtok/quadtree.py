"""
Saliency-based Quadtree: greedy splitting of a uniform coarse grid into a
mixed-resolution patch mosaic.

All nodes of the full quadtree over an image are laid out once per
(height, width, s_min, s_max) in a ``CandidateTable``. Nodes are sorted by
z-order key, which is a pre-order traversal of the tree, so the leaves of any
mosaic read off a boolean mask already come out in canonical order. Splittable
candidates get a second, coarse-to-fine layout; ranking equal scores by that
layout implements the tie-break (larger patch first, then smaller z-order key).

With ties broken that way, candidate priorities form a strict total order and
the greedy loop's full pick order can be read off without iterating: a
candidate is visited after every candidate whose root path stays strictly
above its own path's weakest link, and within one such class the same rule
applies recursively below the class head. ``_greedy_order`` evaluates this
as a lexicographic sort on a handful of path maxima, so the cost of building
a mosaic does not grow with the number of splits.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

from config import PATCH_BUDGETS, S_MAX, S_MIN
from logging_config import get_logger
from quadtok.errors import ContractError, DimensionError, FormatError, UnreachableTargetError
from quadtok.imagecore import Image

if TYPE_CHECKING:
    from quadtok.scorers import PatchScores

logger = get_logger(__name__)

_SPAN_BITS = 16
_MAX_CELLS = 1 << 23


# ========================
# Patches and z-order keys
# ========================
@dataclass(frozen=True)
class PatchRect:
    """Axis-aligned square patch: top-left corner and edge length in pixels."""

    x: int
    y: int
    size: int

    def quadrants(self) -> tuple["PatchRect", "PatchRect", "PatchRect", "PatchRect"]:
        """Top-left, top-right, bottom-left, bottom-right halves."""
        half = self.size // 2
        return (
            PatchRect(self.x, self.y, half),
            PatchRect(self.x + half, self.y, half),
            PatchRect(self.x, self.y + half, half),
            PatchRect(self.x + half, self.y + half, half),
        )

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.size)


def _spread_bits(v):
    v = v & 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def morton_code(cx: int, cy: int) -> int:
    """Interleave cell coordinates: x in the even bits, y in the odd bits."""
    if cx < 0 or cy < 0:
        raise DimensionError("morton code is defined for non-negative cells only")
    return _spread_bits(int(cx)) | (_spread_bits(int(cy)) << 1)


def _odd_part(size: int) -> int:
    return size // (size & -size)


def zkey(patch: PatchRect) -> int:
    """
    Total-order key: Morton code of the top-left cell in units of the odd part
    of the patch size, with the span subtracted so a parent precedes its
    first child.
    """
    base = _odd_part(patch.size)
    span = patch.size // base
    if span >= 1 << _SPAN_BITS or patch.x // base >= _MAX_CELLS or patch.y // base >= _MAX_CELLS:
        raise DimensionError(f"patch {patch} exceeds the z-order key range")
    return (morton_code(patch.x // base, patch.y // base) << _SPAN_BITS) - span


def zkeys(patches: np.ndarray) -> np.ndarray:
    """Vectorized ``zkey`` over an (n, 3) array of [x, y, size] rows."""
    patches = np.asarray(patches, dtype=np.int64).reshape(-1, 3)
    if len(patches) == 0:
        return np.empty(0, dtype=np.int64)
    size = patches[:, 2]
    base = size // (size & -size)
    span = size // base
    cells_x = (patches[:, 0] // base).astype(np.uint64)
    cells_y = (patches[:, 1] // base).astype(np.uint64)
    if span.max() >= 1 << _SPAN_BITS or max(cells_x.max(), cells_y.max()) >= _MAX_CELLS:
        raise DimensionError("patches exceed the z-order key range")
    code = _spread_bits(cells_x) | (_spread_bits(cells_y) << np.uint64(1))
    return (code.astype(np.int64) << _SPAN_BITS) - span


def as_patch_array(patches) -> np.ndarray:
    """Normalize PatchRects / tuples / arrays into an (n, 3) int64 array."""
    if isinstance(patches, np.ndarray):
        return patches.astype(np.int64, copy=False).reshape(-1, 3)
    rows = [p.as_tuple() if isinstance(p, PatchRect) else tuple(p) for p in patches]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def as_rects(patches: np.ndarray) -> list[PatchRect]:
    return [PatchRect(int(x), int(y), int(s)) for x, y, s in np.asarray(patches).tolist()]


# ========================
# Configuration
# ========================
class QuadtreeConfig(BaseModel):
    """Patch edge sizes and the target patch count L."""

    model_config = ConfigDict(frozen=True)

    s_min: PositiveInt = S_MIN
    s_max: PositiveInt = S_MAX
    target_patches: PositiveInt = PATCH_BUDGETS[1]

    @model_validator(mode="after")
    def _check_sizes(self):
        ratio, remainder = divmod(self.s_max, self.s_min)
        if remainder or ratio & (ratio - 1):
            raise ValueError(f"s_max ({self.s_max}) must be s_min ({self.s_min}) times a power of two")
        return self

    @property
    def sizes(self) -> list[int]:
        """Patch sizes from coarsest to finest."""
        sizes, size = [], self.s_max
        while size >= self.s_min:
            sizes.append(size)
            size //= 2
        return sizes

    @property
    def splittable_sizes(self) -> list[int]:
        return [size for size in self.sizes if size >= 2 * self.s_min]

    def check_image(self, height: int, width: int) -> None:
        if height % self.s_max or width % self.s_max:
            raise DimensionError(f"s_max {self.s_max} does not divide image dimensions {height}×{width}")

    def initial_count(self, height: int, width: int) -> int:
        self.check_image(height, width)
        return (height // self.s_max) * (width // self.s_max)

    def max_count(self, height: int, width: int) -> int:
        self.check_image(height, width)
        return (height // self.s_min) * (width // self.s_min)

    def split_count(self, height: int, width: int, strict: bool = True) -> int:
        """
        Number of splits the greedy loop performs for this image size.

        Strict mode rejects any L that the loop cannot hit exactly; lenient mode
        stops at the first count >= L, or when nothing is left to split.
        """
        initial = self.initial_count(height, width)
        maximum = self.max_count(height, width)
        target = self.target_patches
        if strict:
            if target < initial or target > maximum or (target - initial) % 3:
                raise UnreachableTargetError(
                    f"{target} patches unreachable: counts run {initial}, {initial + 3}, ..., {maximum}"
                )
            return (target - initial) // 3
        if target <= initial:
            return 0
        steps = math.ceil((target - initial) / 3)
        max_steps = (maximum - initial) // 3
        if steps > max_steps:
            logger.warning(
                "Target patch count exceeds full resolution, splitting everything",
                extra={"extra_fields": {"target_patches": target, "max_patches": maximum}},
            )
            return max_steps
        return steps


# ========================
# Mosaics
# ========================
@dataclass(frozen=True, eq=False)
class PatchMosaic:
    """Disjoint square patches covering the image, in canonical z-order."""

    patches: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self):
        patches = np.array(self.patches, dtype=np.int64).reshape(-1, 3)
        patches.setflags(write=False)
        object.__setattr__(self, "patches", patches)

    def __len__(self) -> int:
        return len(self.patches)

    def __eq__(self, other):
        return (
            isinstance(other, PatchMosaic)
            and (self.image_height, self.image_width) == (other.image_height, other.image_width)
            and np.array_equal(self.patches, other.patches)
        )

    __hash__ = None

    @property
    def rects(self) -> list[PatchRect]:
        return as_rects(self.patches)

    def to_dict(self) -> dict:
        return {"height": self.image_height, "width": self.image_width, "patches": self.patches.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "PatchMosaic":
        try:
            height, width = int(payload["height"]), int(payload["width"])
            patches = np.asarray(payload["patches"], dtype=np.int64).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed mosaic: {e}", field="patches") from e
        order = np.argsort(zkeys(patches), kind="stable")
        mosaic = cls(patches[order], height, width)
        check_cover(mosaic)
        return mosaic

    @classmethod
    def from_json(cls, text: str) -> "PatchMosaic":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"mosaic is not valid JSON: {e}", field="json") from e
        return cls.from_dict(payload)


def ownership_tally(mosaic: PatchMosaic) -> np.ndarray:
    """Per-pixel count of patches covering that pixel."""
    tally = np.zeros((mosaic.image_height, mosaic.image_width), dtype=np.int32)
    for x, y, size in mosaic.patches.tolist():
        tally[y:y + size, x:x + size] += 1
    return tally


def check_cover(mosaic: PatchMosaic) -> None:
    """Raise ContractError unless patches are in bounds, disjoint and covering."""
    p = mosaic.patches
    if len(p) and (
        (p[:, 2] < 1).any()
        or (p[:, :2] < 0).any()
        or (p[:, 0] + p[:, 2] > mosaic.image_width).any()
        or (p[:, 1] + p[:, 2] > mosaic.image_height).any()
    ):
        raise ContractError("mosaic has patches outside the image")
    if not (ownership_tally(mosaic) == 1).all():
        raise ContractError("mosaic patches are not a disjoint cover of the image")


def initial_grid(height: int, width: int, s_max: int) -> PatchMosaic:
    """Uniform grid of s_max patches in canonical order."""
    if height % s_max or width % s_max:
        raise DimensionError(f"s_max {s_max} does not divide image dimensions {height}×{width}")
    ys, xs = np.mgrid[0:height:s_max, 0:width:s_max]
    patches = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, s_max)], axis=1)
    return PatchMosaic(patches[np.argsort(zkeys(patches), kind="stable")], height, width)


def splittable(mosaic: PatchMosaic, s_min: int) -> list[PatchRect]:
    """Patches with size >= 2·s_min."""
    return as_rects(mosaic.patches[mosaic.patches[:, 2] >= 2 * s_min])


def split_patch(mosaic: PatchMosaic, patch: PatchRect, s_min: int) -> PatchMosaic:
    """Replace ``patch`` by its four quadrants at its canonical position."""
    if patch.size < 2 * s_min or patch.size % 2:
        raise ContractError(f"patch {patch} is too small to split with s_min {s_min}")
    hits = np.flatnonzero((mosaic.patches == np.asarray(patch.as_tuple())).all(axis=1))
    if len(hits) == 0:
        raise ContractError(f"patch {patch} is not in the mosaic")
    index = hits[0]
    children = as_patch_array(patch.quadrants())
    patches = np.concatenate([mosaic.patches[:index], children, mosaic.patches[index + 1:]])
    return PatchMosaic(patches, mosaic.image_height, mosaic.image_width)


def canonical_order(patches) -> list[PatchRect]:
    """Patches sorted by z-order key."""
    array = patches.patches if isinstance(patches, PatchMosaic) else as_patch_array(patches)
    return as_rects(array[np.argsort(zkeys(array), kind="stable")])


# ========================
# Candidate table
# ========================
@dataclass(frozen=True, eq=False)
class CandidateTable:
    """Every node of the full quadtree over an image, in z-order."""

    height: int
    width: int
    rects: np.ndarray        # (N, 3) node rectangles, pre-order
    parent: np.ndarray       # (N,) parent node, -1 for grid roots
    cand_nodes: np.ndarray   # (C,) node index of each candidate, coarse-to-fine then z-order
    cand_paths: np.ndarray   # (C, D) candidate indices from grid root down to self, -1 padded
    root_cands: np.ndarray   # candidate indices of the initial grid

    @property
    def candidates(self) -> np.ndarray:
        return self.rects[self.cand_nodes]

    def __len__(self) -> int:
        return len(self.cand_nodes)


@lru_cache(maxsize=64)
def candidate_table(height: int, width: int, s_min: int, s_max: int) -> CandidateTable:
    cfg = QuadtreeConfig(s_min=s_min, s_max=s_max)
    cfg.check_image(height, width)

    levels = []
    for size in cfg.sizes:
        ys, xs = np.mgrid[0:height:size, 0:width:size]
        levels.append(np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, size)], axis=1))
    all_rects = np.concatenate(levels).astype(np.int64)
    order = np.argsort(zkeys(all_rects), kind="stable")
    rects = all_rects[order]
    index = {tuple(row): i for i, row in enumerate(rects.tolist())}

    parent = np.full(len(rects), -1, dtype=np.intp)
    for i, (x, y, size) in enumerate(rects.tolist()):
        if size < s_max:
            double = 2 * size
            parent[i] = index[(x - x % double, y - y % double, double)]

    sizes = rects[:, 2].tolist()
    cand_nodes = np.asarray(
        [i for size in cfg.splittable_sizes for i, s in enumerate(sizes) if s == size],
        dtype=np.intp,
    )
    cand_of_node = {int(node): c for c, node in enumerate(cand_nodes)}
    cand_paths = np.full((len(cand_nodes), len(cfg.splittable_sizes)), -1, dtype=np.intp)
    for c, node in enumerate(cand_nodes.tolist()):
        path = []
        while node >= 0:
            path.append(cand_of_node[node])
            node = int(parent[node])
        cand_paths[c, :len(path)] = path[::-1]

    root_cands = np.asarray([c for c, node in enumerate(cand_nodes.tolist()) if parent[node] < 0], dtype=np.intp)
    for array in (rects, parent, cand_nodes, cand_paths, root_cands):
        array.setflags(write=False)
    logger.debug(
        "Built candidate table",
        extra={"extra_fields": {"height": height, "width": width, "nodes": len(rects), "candidates": len(cand_nodes)}},
    )
    return CandidateTable(height, width, rects, parent, cand_nodes, cand_paths, root_cands)


def candidate_patches(height: int, width: int, cfg: QuadtreeConfig) -> list[PatchRect]:
    """Every patch that can ever be split, coarse-to-fine then z-order."""
    return as_rects(candidate_table(height, width, cfg.s_min, cfg.s_max).candidates)


# ========================
# Split loop
# ========================
Scorer = Callable[[Image, np.ndarray], "PatchScores"]


def _score_matrix(scores: Sequence["PatchScores"], table: CandidateTable) -> np.ndarray:
    values = np.stack([s.aligned_to(table.candidates) for s in scores]) if scores else np.empty((0, len(table)))
    if not np.all(np.isfinite(values)) or (values < 0).any():
        raise ContractError("patch scores must be finite and non-negative")
    return values


def _greedy_order(values: np.ndarray, table: CandidateTable) -> np.ndarray:
    """(batch, C) candidate indices in the order the greedy loop splits them."""
    batch, count = values.shape
    if count == 0:
        return np.empty((batch, 0), dtype=np.intp)
    index = np.broadcast_to(np.arange(count), values.shape)
    # rank 0 is the highest priority: larger score, then lower candidate index
    by_priority = np.lexsort((index, -values), axis=-1)
    rank = np.empty_like(by_priority)
    np.put_along_axis(rank, by_priority, index, axis=-1)

    paths = table.cand_paths
    depth = paths.shape[1]
    path_rank = np.where(paths >= 0, rank[:, np.maximum(paths, 0)], -1)  # (batch, C, depth)
    positions = np.arange(depth)
    start = np.zeros((batch, count), dtype=np.intp)
    keys = []
    for _ in range(depth):
        window = np.where(positions >= start[..., None], path_rank, -1)
        worst = window.max(axis=-1)
        keys.append(worst)
        start = np.where(worst >= 0, window.argmax(axis=-1) + 1, depth)
    return np.lexsort(keys[::-1], axis=-1)


def _run_splits(values: np.ndarray, table: CandidateTable, steps: int) -> np.ndarray:
    """Batched greedy split loop over candidate space; returns (batch, steps) picks."""
    return _greedy_order(values, table)[:, :steps]


def _leaves(picks: np.ndarray, table: CandidateTable) -> np.ndarray:
    """(batch, L, 3) leaf rectangles in canonical order."""
    batch, steps = picks.shape
    split = np.zeros((batch, len(table.rects)), dtype=bool)
    split[np.arange(batch)[:, None], table.cand_nodes[picks]] = True
    parent_split = np.where(table.parent >= 0, split[:, np.maximum(table.parent, 0)], True)
    leaf = parent_split & ~split
    count = len(table.root_cands) + 3 * steps if len(table) else len(table.rects)
    cols = np.nonzero(leaf)[1].reshape(batch, count)
    return table.rects[cols]


def mosaics_from_scores(
    scores: Sequence["PatchScores"], height: int, width: int, cfg: QuadtreeConfig, strict: bool = True
) -> list[PatchMosaic]:
    """Run the split loop for a batch of precomputed candidate scores."""
    table = candidate_table(height, width, cfg.s_min, cfg.s_max)
    steps = cfg.split_count(height, width, strict)
    values = _score_matrix(scores, table)
    picks = _run_splits(values, table, steps)
    return [PatchMosaic(leaves, height, width) for leaves in _leaves(picks, table)]


def split_sequence(
    scores: "PatchScores", height: int, width: int, cfg: QuadtreeConfig, strict: bool = True
) -> list[PatchRect]:
    """Ordered argmax picks of the split loop for one image."""
    table = candidate_table(height, width, cfg.s_min, cfg.s_max)
    steps = cfg.split_count(height, width, strict)
    picks = _run_splits(_score_matrix([scores], table), table, steps)[0]
    return as_rects(table.candidates[picks])


def build_mosaic(img: Image, cfg: QuadtreeConfig, scorer: Scorer, strict: bool = True) -> PatchMosaic:
    """Score every candidate once, then split greedily until L patches."""
    return build_mosaic_batch([img], cfg, scorer, strict=strict)[0]


def score_batch(imgs: Sequence[Image], cfg: QuadtreeConfig, scorer: Scorer, jobs: int = 1) -> list["PatchScores"]:
    """Candidate scores for images sharing one size; order follows the input."""
    if not imgs:
        return []
    height, width = imgs[0].height, imgs[0].width
    if any((img.height, img.width) != (height, width) for img in imgs):
        raise DimensionError("all images in a batch must share dimensions")
    candidates = candidate_table(height, width, cfg.s_min, cfg.s_max).candidates
    if jobs > 1 and len(imgs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda img: scorer(img, candidates), imgs))
    return [scorer(img, candidates) for img in imgs]


def build_mosaic_batch(
    imgs: Iterable[Image], cfg: QuadtreeConfig, scorer: Scorer, strict: bool = True, jobs: int = 1
) -> list[PatchMosaic]:
    """Per-image identical to ``build_mosaic``; the split loop is batched."""
    imgs = list(imgs)
    if not imgs:
        return []
    scores = score_batch(imgs, cfg, scorer, jobs=jobs)
    return mosaics_from_scores(scores, imgs[0].height, imgs[0].width, cfg, strict)
