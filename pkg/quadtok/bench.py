"""
Per-component runtime breakdown of the tokenization pipeline: patch scorer,
quadtree logic, tokenizer and transformer forward.

Each component is timed on its own precomputed inputs. A repetition runs the
component on the whole image batch ``batch_size`` times; the reported figure
is the median over repetitions of the per-image time. Warmup repetitions are
discarded. Every repetition's output is compared with the first one.
"""

import json
import platform
import statistics
import time
from contextlib import contextmanager, nullcontext
from typing import Callable, Sequence

import numpy as np
import psutil
from pydantic import BaseModel, Field

from config import BENCH_MAX_BATCH, BENCH_MIN_BATCH_SECONDS, BENCH_REPETITIONS, BENCH_WARMUP
from logging_config import get_logger, log_operation
from quadtok.analysis import feature_scorer_macs, format_table, tokenizer_macs, toyvit_macs
from quadtok.errors import ContractError, DimensionError
from quadtok.extractor import FeatureExtractorSpec
from quadtok.imagecore import Image
from quadtok.quadtree import PatchMosaic, QuadtreeConfig, Scorer, candidate_table, mosaics_from_scores
from quadtok.scorers import PatchScores, ScorerConfig
from quadtok.tokenizer import PatchEmbedder, TokenizerConfig, tokenize
from quadtok.toyvit import ModelConfig, ModelWeights, forward

logger = get_logger(__name__)

COMPONENTS = ("scorer", "quadtree", "tokenizer", "transformer")


class ComponentCost(BaseModel):
    name: str
    median_us: float = Field(ge=0.0)
    macs: int = Field(ge=0)
    us_per_gmac: float | None


class CostReport(BaseModel):
    scorer_kind: str
    n_images: int
    image_height: int
    image_width: int
    num_patches: int
    repetitions: int
    warmup: int
    batch_size: int
    components: list[ComponentCost]
    total_us: float
    total_macs: int
    end_to_end_us: float
    tokenization_share: float
    host: dict
    notes: list[str]

    def component(self, name: str) -> ComponentCost:
        return next(c for c in self.components if c.name == name)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        rows = [(c.name, c.median_us, c.macs / 1e9, c.us_per_gmac) for c in self.components]
        rows.append(("total", self.total_us, self.total_macs / 1e9, None))
        rows.append(("end_to_end", self.end_to_end_us, None, None))
        text = format_table(["component", "us/image", "GMACs", "us/GMAC"], rows)
        text += f"\ntokenization share: {self.tokenization_share:.3f}\n"
        text += "".join(f"note: {note}\n" for note in self.notes)
        return text


def host_info() -> dict:
    freq = psutil.cpu_freq()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "processor": platform.processor() or platform.machine(),
        "logical_cpus": psutil.cpu_count(logical=True),
        "physical_cpus": psutil.cpu_count(logical=False),
        "cpu_mhz": round(freq.current, 1) if freq else None,
        "memory_bytes": psutil.virtual_memory().total,
    }


@contextmanager
def pinned_to_one_cpu(notes: list[str]):
    """Restrict the process to a single CPU for the duration of the block."""
    process = psutil.Process()
    try:
        previous = process.cpu_affinity()
        process.cpu_affinity(previous[:1])
    except (AttributeError, psutil.Error, OSError, ValueError):
        notes.append("CPU pinning unavailable on this host")
        yield
        return
    try:
        yield
    finally:
        try:
            process.cpu_affinity(previous)
        except (psutil.Error, OSError):
            logger.warning("Could not restore CPU affinity", exc_info=True)


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return isinstance(b, np.ndarray) and np.array_equal(a, b)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def _time_once(fn: Callable, inner: int):
    start = time.perf_counter()
    for _ in range(inner):
        out = fn()
    return (time.perf_counter() - start) / inner, out


def measure(
    name: str,
    fn: Callable,
    repetitions: int,
    warmup: int,
    notes: list[str],
    min_seconds: float = BENCH_MIN_BATCH_SECONDS,
    max_batch: int = BENCH_MAX_BATCH,
) -> tuple[float, int, object]:
    """
    Median seconds per call of ``fn`` plus the inner batch size used and the
    reference output.
    """
    inner = 1
    elapsed, reference = _time_once(fn, inner)
    while elapsed * inner < min_seconds and inner < max_batch:
        inner *= 2
        elapsed, _ = _time_once(fn, inner)
    if inner > 1:
        notes.append(f"{name}: timer resolution too coarse, widened batch to {inner} runs")

    samples = []
    for rep in range(warmup + repetitions):
        elapsed, out = _time_once(fn, inner)
        if not _same(reference, out):
            raise ContractError(f"{name} output changed between repetitions")
        if rep >= warmup:
            samples.append(elapsed)
    return statistics.median(samples), inner, reference


def bench_breakdown(
    imgs: Sequence[Image],
    scorer: Scorer,
    quadtree_cfg: QuadtreeConfig,
    scorer_cfg: ScorerConfig,
    tokenizer_cfg: TokenizerConfig,
    embedder: PatchEmbedder,
    model_cfg: ModelConfig,
    weights: ModelWeights,
    extractor: FeatureExtractorSpec | None = None,
    repetitions: int = BENCH_REPETITIONS,
    warmup: int = BENCH_WARMUP,
    pin: bool = True,
) -> CostReport:
    """Median per-image wall time and MACs for each pipeline component."""
    imgs = list(imgs)
    if not imgs:
        raise ContractError("bench needs at least one image")
    if repetitions < 1 or warmup < 0:
        raise ContractError(f"invalid repetitions {repetitions} / warmup {warmup}")
    height, width = imgs[0].height, imgs[0].width
    mismatched = [(img.height, img.width) for img in imgs if (img.height, img.width) != (height, width)]
    if mismatched:
        raise DimensionError(f"bench images must share one size {height}×{width}, got {mismatched}")
    candidates = candidate_table(height, width, quadtree_cfg.s_min, quadtree_cfg.s_max).candidates
    notes: list[str] = []

    def run_scorer() -> list[PatchScores]:
        return [scorer(img, candidates) for img in imgs]

    def run_quadtree(scores) -> list[PatchMosaic]:
        return mosaics_from_scores(scores, height, width, quadtree_cfg)

    def run_tokenizer(mosaics) -> list[np.ndarray]:
        return [tokenize(img, m, embedder, tokenizer_cfg)[0] for img, m in zip(imgs, mosaics)]

    def run_transformer(tokens) -> list[np.ndarray]:
        return [forward(t, weights, model_cfg) for t in tokens]

    def run_all() -> list[np.ndarray]:
        return run_transformer(run_tokenizer(run_quadtree(run_scorer())))

    context = {"images": len(imgs), "target_patches": quadtree_cfg.target_patches, "scorer": scorer_cfg.kind}
    with log_operation(logger, "bench_breakdown", context), (pinned_to_one_cpu(notes) if pin else nullcontext()):
        seconds, batches = {}, []
        seconds["scorer"], n, scores = measure("scorer", run_scorer, repetitions, warmup, notes)
        batches.append(n)
        seconds["quadtree"], n, mosaics = measure("quadtree", lambda: run_quadtree(scores), repetitions, warmup, notes)
        batches.append(n)
        seconds["tokenizer"], n, tokens = measure("tokenizer", lambda: run_tokenizer(mosaics), repetitions, warmup, notes)
        batches.append(n)
        seconds["transformer"], n, _ = measure("transformer", lambda: run_transformer(tokens), repetitions, warmup, notes)
        batches.append(n)
        end_to_end, n, _ = measure("end_to_end", run_all, repetitions, warmup, notes)
        batches.append(n)

    num_patches = len(mosaics[0])
    macs = {
        "scorer": 0,
        "quadtree": 0,
        "tokenizer": tokenizer_macs(num_patches, tokenizer_cfg.rep_length, tokenizer_cfg.d_model),
        "transformer": toyvit_macs(model_cfg, num_patches),
    }
    if scorer_cfg.kind == "feature_based" and extractor is not None:
        n_sizes = len(np.unique(candidates[:, 2]))
        macs["scorer"] = feature_scorer_macs(extractor, height, width, n_sizes, scorer_cfg.scoring_scale)

    per_image = {name: seconds[name] / len(imgs) * 1e6 for name in COMPONENTS}
    components = [
        ComponentCost(
            name=name,
            median_us=per_image[name],
            macs=macs[name],
            us_per_gmac=per_image[name] / (macs[name] / 1e9) if macs[name] else None,
        )
        for name in COMPONENTS
    ]
    total = sum(per_image.values())
    share = (per_image["scorer"] + per_image["quadtree"] + per_image["tokenizer"]) / total if total else 0.0
    return CostReport(
        scorer_kind=scorer_cfg.kind,
        n_images=len(imgs),
        image_height=height,
        image_width=width,
        num_patches=num_patches,
        repetitions=repetitions,
        warmup=warmup,
        batch_size=max(batches),
        components=components,
        total_us=total,
        total_macs=sum(macs.values()),
        end_to_end_us=end_to_end / len(imgs) * 1e6,
        tokenization_share=share,
        host=host_info(),
        notes=notes,
    )
