"""
Shared pipeline operations used by both the CLI and the HTTP service.
"""

import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, model_validator

from config import (
    DEFAULT_SEED,
    IMAGE_SIZE,
    MANIFEST_SCHEMA_VERSION,
    PATCH_BUDGETS,
    SCORER_KINDS,
    VIT_ARCHITECTURES,
)
from logging_config import get_logger, log_operation
from quadtok import __version__
from quadtok.errors import ContractError, FormatError
from quadtok.extractor import FeatureExtractorSpec, default_extractor_spec
from quadtok.imagecore import Image
from quadtok.quadtree import PatchMosaic, QuadtreeConfig, candidate_table, mosaics_from_scores, score_batch
from quadtok.scorers import PatchScores, SaliencyMap, ScorerConfig, make_scorer
from quadtok.tensorio import save_tensor
from quadtok.tokenizer import PatchEmbedder, TokenizerConfig, TokenSequence, build_sequence, embed_tokens, scale_positions
from quadtok.toyvit import ModelConfig, ModelWeights, forward, init_weights

logger = get_logger(__name__)


class PipelineConfig(BaseModel):
    """Everything needed to turn an image into logits, echoed into run manifests."""

    model_config = ConfigDict(frozen=True)

    quadtree: QuadtreeConfig = Field(default_factory=QuadtreeConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    seed: int = DEFAULT_SEED
    strict: bool = True
    train_grid: tuple[PositiveFloat, PositiveFloat] | None = None

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.tokenizer.s_min != self.quadtree.s_min:
            raise ValueError(f"tokenizer s_min {self.tokenizer.s_min} != quadtree s_min {self.quadtree.s_min}")
        if self.scorer.s_rep != self.tokenizer.s_rep:
            raise ValueError(f"scorer s_rep {self.scorer.s_rep} != tokenizer s_rep {self.tokenizer.s_rep}")
        if self.model.d_model != self.tokenizer.d_model:
            raise ValueError(f"model d_model {self.model.d_model} != tokenizer d_model {self.tokenizer.d_model}")
        return self


class RunManifest(BaseModel):
    """Written next to every output; enough to rerun the command bit-exactly."""

    schema_version: int = MANIFEST_SCHEMA_VERSION
    tool_version: str = __version__
    command: str
    config: PipelineConfig
    inputs: list[str] = []
    extractor: str | None = None
    saliency: list[str] = []
    weights: str | None = None
    embedder: str | None = None
    outputs: list[str] = []

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except ValidationError as e:
            raise FormatError(f"invalid run manifest {path}: {e}", field="manifest") from e


def load_pipeline_config(path) -> dict:
    """Raw ``PipelineConfig``-shaped mapping from a JSON file."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"config file {path} is not valid JSON: {e}", field="config") from e
    if not isinstance(payload, dict):
        raise FormatError(f"config file {path} must hold an object", field="config")
    return payload


def get_configuration() -> dict:
    """Defaults and named registries"""
    logger.debug("Retrieving pipeline configuration")
    return {
        "defaults": PipelineConfig().model_dump(mode="json"),
        "image_size": IMAGE_SIZE,
        "patch_budgets": list(PATCH_BUDGETS),
        "scorer_kinds": SCORER_KINDS,
        "vit_architectures": VIT_ARCHITECTURES,
        "version": __version__,
    }


# ========================
# Scoring and mosaics
# ========================
def _groups_by_size(imgs: Sequence[Image]) -> dict[tuple[int, int], list[int]]:
    groups = defaultdict(list)
    for i, img in enumerate(imgs):
        groups[(img.height, img.width)].append(i)
    return groups


def score_images(
    imgs: Sequence[Image],
    cfg: PipelineConfig,
    extractor: FeatureExtractorSpec | None = None,
    saliency: Sequence[SaliencyMap] | None = None,
    jobs: int = 1,
) -> list[PatchScores]:
    """Candidate scores per image, in input order. Saliency maps pair with images one to one."""
    imgs = list(imgs)
    with log_operation(logger, "score_images", {"images": len(imgs), "scorer": cfg.scorer.kind}):
        if cfg.scorer.kind == "external_saliency":
            if not saliency or len(saliency) != len(imgs):
                raise ContractError(f"the external-saliency scorer needs one saliency map per image ({len(imgs)})")
            out = []
            for img, smap in zip(imgs, saliency):
                candidates = candidate_table(img.height, img.width, cfg.quadtree.s_min, cfg.quadtree.s_max).candidates
                out.append(make_scorer(cfg.scorer, saliency=smap)(img, candidates))
            return out

        scorer = make_scorer(cfg.scorer, extractor=extractor)
        out: list[PatchScores | None] = [None] * len(imgs)
        for indices in _groups_by_size(imgs).values():
            for i, scores in zip(indices, score_batch([imgs[i] for i in indices], cfg.quadtree, scorer, jobs)):
                out[i] = scores
        return out


def build_mosaics(imgs: Sequence[Image], scores: Sequence[PatchScores], cfg: PipelineConfig) -> list[PatchMosaic]:
    """Split loop per image size group; output follows input order."""
    imgs = list(imgs)
    out: list[PatchMosaic | None] = [None] * len(imgs)
    with log_operation(logger, "build_mosaics", {"images": len(imgs), "target_patches": cfg.quadtree.target_patches}):
        for (height, width), indices in _groups_by_size(imgs).items():
            mosaics = mosaics_from_scores([scores[i] for i in indices], height, width, cfg.quadtree, cfg.strict)
            for i, mosaic in zip(indices, mosaics):
                out[i] = mosaic
    return out


# ========================
# Tokens and model
# ========================
def make_embedder(cfg: PipelineConfig, path=None) -> PatchEmbedder:
    embedder = PatchEmbedder.load(path) if path else PatchEmbedder.initialize(cfg.tokenizer, cfg.seed)
    embedder.check(cfg.tokenizer)
    return embedder


def make_weights(cfg: PipelineConfig, path=None) -> tuple[ModelWeights, ModelConfig]:
    if path:
        return ModelWeights.load(path)
    return init_weights(cfg.model, cfg.seed), cfg.model


def tokenize_image(
    img: Image, mosaic: PatchMosaic, embedder: PatchEmbedder, cfg: PipelineConfig
) -> tuple[np.ndarray, TokenSequence]:
    """Tokenize one image, rescaling positions to ``cfg.train_grid`` when set."""
    with log_operation(logger, "tokenize", {"patches": len(mosaic)}):
        seq = build_sequence(img, mosaic, cfg.tokenizer)
        if cfg.train_grid is not None:
            s_min = cfg.tokenizer.s_min
            seq = scale_positions(seq, cfg.train_grid, (img.width / s_min, img.height / s_min))
        return embed_tokens(seq, embedder), seq


def run_forward(tokens: np.ndarray, weights: ModelWeights, model_cfg: ModelConfig) -> np.ndarray:
    with log_operation(logger, "forward", {"tokens": int(np.shape(tokens)[0])}):
        return forward(tokens, weights, model_cfg)


def feature_extractor(path=None, seed: int = DEFAULT_SEED) -> FeatureExtractorSpec:
    return FeatureExtractorSpec.load(path) if path else default_extractor_spec(seed)


def write_token_outputs(directory, stem: str, mosaic: PatchMosaic, tokens: np.ndarray,
                        seq: TokenSequence) -> list[str]:
    """``<stem>.mosaic.json``, ``<stem>.tokens.mtok`` and its ``<stem>.tokens.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        f"{stem}.mosaic.json": mosaic.to_json(),
        f"{stem}.tokens.json": seq.sidecar_json(),
    }
    for name, text in files.items():
        (directory / name).write_text(text + "\n")
    save_tensor(tokens, directory / f"{stem}.tokens.mtok")
    return [f"{stem}.mosaic.json", f"{stem}.tokens.mtok", f"{stem}.tokens.json"]
