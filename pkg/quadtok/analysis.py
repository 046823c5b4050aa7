"""
Measurement machinery: rank correlation between scorers, mosaic composition
statistics and analytic multiply-accumulate accounting.
"""

import csv
import io
import json
import warnings
from collections.abc import Mapping, Sequence
from itertools import combinations
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt, TypeAdapter, ValidationError
from scipy.stats import kendalltau, spearmanr

from config import VIT_ARCHITECTURES
from logging_config import get_logger, log_operation
from quadtok.errors import ContractError
from quadtok.extractor import FeatureExtractorSpec
from quadtok.imagecore import Image
from quadtok.quadtree import QuadtreeConfig, Scorer, mosaics_from_scores, score_batch
from quadtok.scorers import PatchScores
from quadtok.toyvit import ModelConfig

logger = get_logger(__name__)

Coefficient = Literal["kendall", "spearman"]


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned plain-text columns; floats at 6 decimals, None as '-'."""

    def cell(value) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.6f}"
        return str(value)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


# ========================
# Rank correlation
# ========================
def _vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, PatchScores) and isinstance(b, PatchScores):
        b = b.aligned_to(a.patches)
        a = a.values
    elif isinstance(a, PatchScores):
        a = a.values
    elif isinstance(b, PatchScores):
        b = b.values
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"score vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ContractError("rank correlation needs at least two scores")
    return a, b


def _defined(value) -> float | None:
    value = float(value)
    return None if np.isnan(value) else value


def kendall_tau(a, b) -> float | None:
    """Tie-corrected Kendall τ-b; None when either side is entirely tied."""
    a, b = _vectors(a, b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return _defined(kendalltau(a, b).statistic)


def spearman(a, b) -> float | None:
    """Pearson correlation of mid-ranks; None when either side is entirely tied."""
    a, b = _vectors(a, b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return _defined(spearmanr(a, b).statistic)


_COEFFICIENTS = {"kendall": kendall_tau, "spearman": spearman}


def fraction_closer(reference: Sequence, a: Sequence, b: Sequence, coefficient: Coefficient = "kendall") -> float:
    """
    Fraction of images where corr(reference, a) > corr(reference, b).

    Ties count in the denominator only. An undefined coefficient ranks below
    every defined one.
    """
    if not (len(reference) == len(a) == len(b)):
        raise ContractError(f"per-image score sets misaligned: {len(reference)}, {len(a)}, {len(b)}")
    if not reference:
        raise ContractError("no images to compare")
    corr = _COEFFICIENTS[coefficient]
    wins = 0
    for ref, sa, sb in zip(reference, a, b):
        ca, cb = corr(ref, sa), corr(ref, sb)
        if ca is not None and (cb is None or ca > cb):
            wins += 1
    return wins / len(reference)


class PairCorrelation(BaseModel):
    a: str
    b: str
    kendall: list[float | None]
    spearman: list[float | None]
    mean_kendall: float | None
    mean_spearman: float | None


class CloserFraction(BaseModel):
    reference: str
    a: str
    b: str
    coefficient: Coefficient
    fraction: float = Field(ge=0.0, le=1.0)


class RankCorrelationReport(BaseModel):
    n_images: int
    n_candidates: int
    reference: str | None
    pairs: list[PairCorrelation]
    closer: list[CloserFraction]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        text = format_table(
            ["a", "b", "kendall", "spearman"],
            [(p.a, p.b, p.mean_kendall, p.mean_spearman) for p in self.pairs],
        )
        if self.closer:
            text += "\n" + format_table(
                ["reference", "a", "b", "coefficient", "fraction"],
                [(c.reference, c.a, c.b, c.coefficient, c.fraction) for c in self.closer],
            )
        return text


def _mean(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def correlate_scorers(scores: Mapping[str, Sequence[PatchScores]], reference: str | None = None) -> RankCorrelationReport:
    """
    Per-image τ and ρ for every scorer pair plus, given a reference scorer, the
    fraction of images where each other scorer ranks closer to it than another.
    """
    names = list(scores)
    if len(names) < 2:
        raise ContractError("need at least two scorers to correlate")
    n_images = len(scores[names[0]])
    if any(len(scores[name]) != n_images for name in names):
        raise ContractError("every scorer must score the same images")
    if reference is not None and reference not in scores:
        raise ContractError(f"reference scorer {reference!r} not among {names}")

    with log_operation(logger, "correlate_scorers", {"scorers": names, "images": n_images}):
        pairs = []
        for a, b in combinations(names, 2):
            kendall = [kendall_tau(sa, sb) for sa, sb in zip(scores[a], scores[b])]
            rho = [spearman(sa, sb) for sa, sb in zip(scores[a], scores[b])]
            pairs.append(PairCorrelation(a=a, b=b, kendall=kendall, spearman=rho,
                                         mean_kendall=_mean(kendall), mean_spearman=_mean(rho)))
        closer = []
        if reference is not None:
            others = [name for name in names if name != reference]
            for a, b in combinations(others, 2):
                for first, second in ((a, b), (b, a)):
                    for coefficient in ("kendall", "spearman"):
                        fraction = fraction_closer(scores[reference], scores[first], scores[second], coefficient)
                        closer.append(CloserFraction(reference=reference, a=first, b=second,
                                                     coefficient=coefficient, fraction=fraction))
    n_candidates = len(scores[names[0]][0]) if n_images else 0
    return RankCorrelationReport(n_images=n_images, n_candidates=n_candidates, reference=reference,
                                 pairs=pairs, closer=closer)


# ========================
# Mosaic composition
# ========================
class CompositionRow(BaseModel):
    target_patches: int
    image_height: int
    image_width: int
    n_images: int
    fractions: dict[int, float]


class CompositionReport(BaseModel):
    sizes: list[int]
    rows: list[CompositionRow]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        headers = ["L", "height", "width"] + [f"frac{s}" for s in self.sizes]
        rows = [
            [r.target_patches, r.image_height, r.image_width] + [r.fractions[s] for s in self.sizes]
            for r in self.rows
        ]
        return format_table(headers, rows)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["L"] + [f"frac{s}" for s in self.sizes])
        for row in self.rows:
            writer.writerow([row.target_patches] + [repr(row.fractions[s]) for s in self.sizes])
        return out.getvalue()


def area_fractions(patches: np.ndarray, height: int, width: int, sizes: Sequence[int]) -> dict[int, float]:
    area = height * width
    return {s: float(np.sum(patches[:, 2] == s)) * s * s / area for s in sizes}


def composition_stats(
    imgs: Sequence[Image],
    targets: Sequence[int],
    scorer: Scorer,
    cfg: QuadtreeConfig | None = None,
    strict: bool = True,
    jobs: int = 1,
) -> CompositionReport:
    """
    Mean fraction of image area per patch size for each target L.

    Candidates are scored once per image; every L replays the split loop from
    the same scores.
    """
    if not imgs:
        raise ContractError("composition needs at least one image")
    cfg = cfg or QuadtreeConfig()
    with log_operation(logger, "composition_stats", {"images": len(imgs), "targets": list(targets)}):
        scores = score_batch(imgs, cfg, scorer, jobs=jobs)
        return composition_from_scores(scores, imgs[0].height, imgs[0].width, targets, cfg, strict)


def composition_from_scores(
    scores: Sequence[PatchScores],
    height: int,
    width: int,
    targets: Sequence[int],
    cfg: QuadtreeConfig | None = None,
    strict: bool = True,
) -> CompositionReport:
    """``composition_stats`` for candidate scores computed elsewhere."""
    if not scores:
        raise ContractError("composition needs at least one image")
    cfg = cfg or QuadtreeConfig()
    rows = []
    for target in targets:
        level_cfg = cfg.model_copy(update={"target_patches": target})
        mosaics = mosaics_from_scores(scores, height, width, level_cfg, strict)
        per_image = [area_fractions(m.patches, height, width, cfg.sizes) for m in mosaics]
        fractions = {s: float(np.mean([f[s] for f in per_image])) for s in cfg.sizes}
        rows.append(CompositionRow(target_patches=target, image_height=height, image_width=width,
                                   n_images=len(scores), fractions=fractions))
    return CompositionReport(sizes=cfg.sizes, rows=rows)


# ========================
# Multiply-accumulate accounting
# ========================
class ConvMacs(BaseModel):
    """k×k convolution producing (height/stride)×(width/stride)×out_channels."""

    kind: Literal["conv"] = "conv"
    height: PositiveInt
    width: PositiveInt
    in_channels: PositiveInt
    out_channels: PositiveInt
    kernel: PositiveInt
    stride: PositiveInt = 1


class LinearMacs(BaseModel):
    kind: Literal["linear"] = "linear"
    in_features: PositiveInt
    out_features: PositiveInt
    tokens: NonNegativeInt = 1


class AttentionMacs(BaseModel):
    """Self-attention over ``tokens``; Q/K/V/O projections included unless disabled."""

    kind: Literal["attention"] = "attention"
    tokens: NonNegativeInt
    d_model: PositiveInt
    projections: bool = True


class QuadtreeMacs(BaseModel):
    kind: Literal["quadtree"] = "quadtree"


LayerDescriptor = Annotated[Union[ConvMacs, LinearMacs, AttentionMacs, QuadtreeMacs], Field(discriminator="kind")]
_DESCRIPTOR = TypeAdapter(LayerDescriptor)


def count_macs(descriptor) -> int:
    """
    conv: (H/s)·(W/s)·c_in·c_out·k²; linear: tokens·in·out;
    attention: 2·L²·d plus 4·L·d² for projections; quadtree: 0.
    """
    if isinstance(descriptor, Mapping):
        try:
            descriptor = _DESCRIPTOR.validate_python(descriptor)
        except ValidationError as e:
            raise ContractError(f"unknown or malformed layer descriptor: {e}") from e
    match descriptor:
        case ConvMacs(height=h, width=w, in_channels=ci, out_channels=co, kernel=k, stride=s):
            return (h // s) * (w // s) * ci * co * k * k
        case LinearMacs(in_features=i, out_features=o, tokens=n):
            return n * i * o
        case AttentionMacs(tokens=n, d_model=d, projections=p):
            return 2 * n * n * d + (4 * n * d * d if p else 0)
        case QuadtreeMacs():
            return 0
    raise ContractError(f"unknown layer kind {type(descriptor).__name__}")


def extractor_descriptors(spec: FeatureExtractorSpec, height: int, width: int) -> list[ConvMacs]:
    descriptors = []
    for layer in spec.layers:
        descriptors.append(ConvMacs(height=height, width=width, in_channels=layer.in_channels,
                                    out_channels=layer.out_channels, kernel=layer.kernel, stride=layer.stride))
        height, width = height // layer.stride, width // layer.stride
    return descriptors


def extractor_macs(spec: FeatureExtractorSpec, height: int, width: int) -> int:
    return sum(count_macs(d) for d in extractor_descriptors(spec, height, width))


def feature_scorer_macs(spec: FeatureExtractorSpec, height: int, width: int, n_sizes: int,
                        scoring_scale: float = 1.0) -> int:
    """One pass on the original plus one per distinct candidate size."""
    ratio = spec.downscale_ratio
    sh = max(ratio, round(height * scoring_scale / ratio) * ratio)
    sw = max(ratio, round(width * scoring_scale / ratio) * ratio)
    return extractor_macs(spec, sh, sw) * (1 + n_sizes)


def tokenizer_macs(num_patches: int, rep_length: int, d_model: int) -> int:
    return count_macs(LinearMacs(in_features=rep_length, out_features=d_model, tokens=num_patches))


def encoder_descriptors(cfg: ModelConfig, num_tokens: int) -> list:
    """Encoder blocks plus the classifier head; ``num_tokens`` includes CLS."""
    descriptors = []
    for _ in range(cfg.n_layers):
        descriptors += [
            AttentionMacs(tokens=num_tokens, d_model=cfg.d_model),
            LinearMacs(in_features=cfg.d_model, out_features=cfg.mlp_dim, tokens=num_tokens),
            LinearMacs(in_features=cfg.mlp_dim, out_features=cfg.d_model, tokens=num_tokens),
        ]
    descriptors.append(LinearMacs(in_features=cfg.d_model, out_features=cfg.n_classes))
    return descriptors


def toyvit_macs(cfg: ModelConfig, num_patches: int) -> int:
    return sum(count_macs(d) for d in encoder_descriptors(cfg, num_patches + 1))


def vit_config(name: str) -> ModelConfig:
    try:
        return ModelConfig(**VIT_ARCHITECTURES[name])
    except KeyError as e:
        raise ContractError(f"unknown architecture {name!r}; choose from {sorted(VIT_ARCHITECTURES)}") from e


def vit_macs(cfg: ModelConfig | str, num_patches: int, s_rep: int = 16) -> int:
    """Patch embedding + encoder + head for a full-size encoder at L patches."""
    if isinstance(cfg, str):
        cfg = vit_config(cfg)
    return tokenizer_macs(num_patches, 3 * s_rep * s_rep, cfg.d_model) + toyvit_macs(cfg, num_patches)
