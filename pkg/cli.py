"""
quadtok: saliency-based quadtree tokenization from the command line.

Every pipeline setting can come from a flag or from ``--config file.json``
(a PipelineConfig-shaped object); flags win over the file, the file wins over
the built-in defaults.
"""

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from config import BENCH_REPETITIONS, BENCH_WARMUP, DEFAULT_SEED, PATCH_BUDGETS, SCORER_KINDS
from logging_config import get_logger, setup_logging
from quadtok import __version__
from quadtok.analysis import composition_from_scores, correlate_scorers
from quadtok.bench import bench_breakdown
from quadtok.errors import ContractError, DimensionError, FormatError, QuadtokError
from quadtok.extractor import FeatureExtractorSpec, default_extractor_spec
from quadtok.imagecore import UPSAMPLE_MODES, load_ppm, save_ppm
from quadtok.pipeline import (
    PipelineConfig,
    RunManifest,
    build_mosaics,
    load_pipeline_config,
    make_embedder,
    make_weights,
    run_forward,
    score_images,
    tokenize_image,
    write_token_outputs,
)
from quadtok.quadtree import PatchMosaic
from quadtok.render import parse_color, render_mosaic, score_heatmaps
from quadtok.scorers import PatchScores, SaliencyMap, make_scorer
from quadtok.tensorio import load_tensor
from quadtok.tokenizer import PatchEmbedder
from quadtok.toyvit import init_weights

logger = get_logger("quadtok.cli")

EXIT_UNEXPECTED = 1
EXIT_USAGE = 2


# ========================
# Configuration
# ========================
def _put(tree: dict, section: str | None, key: str, value) -> None:
    if value is None:
        return
    if section is None:
        tree[key] = value
    else:
        tree.setdefault(section, {})[key] = value


def build_config(args) -> PipelineConfig:
    """Merge defaults, the optional config file and explicitly given flags."""
    tree = load_pipeline_config(args.config) if getattr(args, "config", None) else {}
    model_config = getattr(args, "model_config", None)
    if model_config:
        tree["model"] = load_pipeline_config(model_config)

    flag = lambda name: getattr(args, name, None)  # noqa: E731
    _put(tree, "quadtree", "s_min", flag("s_min"))
    _put(tree, "quadtree", "s_max", flag("s_max"))
    _put(tree, "quadtree", "target_patches", flag("patches"))
    _put(tree, "scorer", "kind", SCORER_KINDS.get(flag("scorer")) if flag("scorer") else None)
    _put(tree, "scorer", "s_rep", flag("s_rep"))
    _put(tree, "scorer", "scoring_scale", flag("scoring_scale"))
    _put(tree, "scorer", "upsample_mode", flag("upsample"))
    _put(tree, "tokenizer", "s_rep", flag("s_rep"))
    _put(tree, "tokenizer", "s_min", flag("s_min"))
    _put(tree, "tokenizer", "d_model", flag("d_model"))
    _put(tree, "model", "d_model", flag("d_model"))
    _put(tree, None, "seed", flag("seed"))
    _put(tree, None, "train_grid", flag("train_grid"))
    if flag("lenient"):
        tree["strict"] = False

    # settings shared between sections follow the section that owns them
    quadtree, scorer = tree.get("quadtree", {}), tree.get("scorer", {})
    tokenizer, model = tree.setdefault("tokenizer", {}), tree.setdefault("model", {})
    if "s_min" in quadtree:
        tokenizer.setdefault("s_min", quadtree["s_min"])
    if "s_rep" in scorer:
        tokenizer.setdefault("s_rep", scorer["s_rep"])
    if "d_model" in model:
        tokenizer.setdefault("d_model", model["d_model"])
    if "d_model" in tokenizer:
        model.setdefault("d_model", tokenizer["d_model"])
    return PipelineConfig.model_validate(tree)


def _stem(path) -> str:
    return Path(path).stem


def _manifest(command: str, cfg: PipelineConfig, args, outputs: list[str]) -> RunManifest:
    return RunManifest(
        command=command,
        config=cfg,
        inputs=[str(p) for p in getattr(args, "images", None) or []],
        extractor=getattr(args, "extractor", None),
        saliency=[str(p) for p in getattr(args, "saliency", None) or []],
        weights=getattr(args, "weights", None),
        embedder=getattr(args, "embedder", None),
        outputs=outputs,
    )


def _extractor(args, cfg: PipelineConfig) -> FeatureExtractorSpec | None:
    if cfg.scorer.kind != "feature_based":
        return None
    if not args.extractor:
        raise ContractError("--scorer feature needs --extractor DIR (see `quadtok export-extractor`)")
    return FeatureExtractorSpec.load(args.extractor)


def _saliency(args, cfg: PipelineConfig) -> list[SaliencyMap] | None:
    if cfg.scorer.kind != "external_saliency":
        return None
    if not args.saliency:
        raise ContractError("--scorer saliency needs --saliency MAP for every image")
    return [SaliencyMap.load(p) for p in args.saliency]


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ========================
# Commands
# ========================
def cmd_tokenize(args) -> int:
    cfg = build_config(args)
    imgs = [load_ppm(p) for p in args.images]
    scores = score_images(imgs, cfg, _extractor(args, cfg), _saliency(args, cfg), jobs=args.jobs)
    mosaics = build_mosaics(imgs, scores, cfg)
    embedder = make_embedder(cfg, args.embedder)
    out = Path(args.out)
    outputs = []
    for path, img, mosaic in zip(args.images, imgs, mosaics):
        tokens, seq = tokenize_image(img, mosaic, embedder, cfg)
        outputs += write_token_outputs(out, _stem(path), mosaic, tokens, seq)
        print(f"{path}: {len(mosaic)} patches -> {out / _stem(path)}.tokens.mtok")
    _manifest("tokenize", cfg, args, outputs).write(out / "manifest.json")
    return 0


def cmd_render(args) -> int:
    cfg = build_config(args)
    img = load_ppm(args.image)
    mosaic = PatchMosaic.from_json(Path(args.mosaic).read_text())
    grid = parse_color(args.grid_color) if args.grid else None
    rendered = render_mosaic(img, mosaic, cfg.tokenizer.s_rep, args.mode, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ppm(rendered, out)
    manifest = _manifest("render", cfg, args, [out.name])
    manifest.inputs = [str(args.image), str(args.mosaic)]
    manifest.write(out.with_name(out.name + ".manifest.json"))
    print(f"{args.image}: rendered {len(mosaic)} patches -> {out}")
    return 0


def cmd_score(args) -> int:
    cfg = build_config(args)
    imgs = [load_ppm(p) for p in args.images]
    all_scores = score_images(imgs, cfg, _extractor(args, cfg), _saliency(args, cfg), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path, img, scores in zip(args.images, imgs, all_scores):
        name = f"{_stem(path)}.scores.json"
        (out / name).write_text(scores.to_json() + "\n")
        outputs.append(name)
        if args.heatmap:
            for size, heatmap in score_heatmaps(scores, img.height, img.width).items():
                heat_name = f"{_stem(path)}.heat{size}.ppm"
                save_ppm(heatmap, out / heat_name)
                outputs.append(heat_name)
        print(f"{path}: {len(scores)} candidate scores -> {out / name}")
    _manifest("score", cfg, args, outputs).write(out / "manifest.json")
    return 0


def cmd_correlate(args) -> int:
    scores = {}
    for name, *files in args.set:
        if not files:
            raise FormatError(f"scorer set {name!r} lists no score files", field="set")
        scores[name] = [PatchScores.from_json(Path(f).read_text()) for f in files]
    report = correlate_scorers(scores, reference=args.reference)
    _emit(report.to_json() if args.format == "json" else report.to_text(), args.out)
    return 0


def cmd_stats(args) -> int:
    cfg = build_config(args)
    imgs = [load_ppm(p) for p in args.images]
    if len({(img.height, img.width) for img in imgs}) > 1:
        raise ContractError("composition statistics need images of one size")
    scores = score_images(imgs, cfg, _extractor(args, cfg), _saliency(args, cfg), jobs=args.jobs)
    report = composition_from_scores(scores, imgs[0].height, imgs[0].width, args.targets, cfg.quadtree, cfg.strict)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    _emit(report.to_json() if args.format == "json" else report.to_text(), args.out)
    return 0


def cmd_bench(args) -> int:
    cfg = build_config(args)
    imgs = [load_ppm(p) for p in args.images]
    if len({(img.height, img.width) for img in imgs}) > 1:
        raise DimensionError("bench images must all share one size")
    extractor = _extractor(args, cfg)
    saliency = _saliency(args, cfg)
    if saliency is not None and len(imgs) != 1:
        raise ContractError("benchmarking the external-saliency scorer takes exactly one image")
    scorer = make_scorer(cfg.scorer, extractor=extractor, saliency=saliency[0] if saliency else None)
    weights, model_cfg = make_weights(cfg, args.weights)
    report = bench_breakdown(
        imgs, scorer, cfg.quadtree, cfg.scorer, cfg.tokenizer, make_embedder(cfg, args.embedder),
        model_cfg, weights, extractor=extractor, repetitions=args.repetitions, warmup=args.warmup,
        pin=not args.no_pin,
    )
    _emit(report.to_json() if args.format == "json" else report.to_text(), args.out)
    return 0


def cmd_forward(args) -> int:
    cfg = build_config(args)
    tokens = load_tensor(args.tokens)
    weights, model_cfg = make_weights(cfg, args.weights)
    logits = run_forward(tokens, weights, model_cfg)
    payload = {"logits": logits.tolist(), "num_tokens": int(tokens.shape[0]) if tokens.ndim else 0}
    text = json.dumps(payload, sort_keys=True) + "\n"
    _emit(text, args.out)
    if args.out:
        manifest = _manifest("forward", cfg, args, [Path(args.out).name])
        manifest.inputs = [str(args.tokens)]
        manifest.write(Path(args.out).with_name(Path(args.out).name + ".manifest.json"))
    return 0


def cmd_export_extractor(args) -> int:
    spec = default_extractor_spec(args.seed)
    spec.save(args.out)
    print(f"feature extractor (×{spec.downscale_ratio}, depth {spec.depth}) -> {args.out}")
    return 0


def cmd_init_weights(args) -> int:
    cfg = build_config(args)
    weights = init_weights(cfg.model, cfg.seed)
    weights.save(args.out, cfg.model)
    print(f"toy ViT weights (seed {cfg.seed}) -> {args.out}")
    if args.embedder_out:
        PatchEmbedder.initialize(cfg.tokenizer, cfg.seed).save(args.embedder_out)
        print(f"patch embedder (seed {cfg.seed}) -> {args.embedder_out}")
    return 0


# ========================
# Parser
# ========================
def _pipeline_flags(scoring: bool = True) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("pipeline")
    group.add_argument("--config", help="JSON file holding a pipeline configuration; flags override it")
    group.add_argument("--patches", type=int, help="target patch count L")
    group.add_argument("--s-min", type=int, help="smallest patch edge in pixels")
    group.add_argument("--s-max", type=int, help="largest patch edge in pixels")
    group.add_argument("--s-rep", type=int, help="representation size every patch is resized to")
    group.add_argument("--d-model", type=int, help="embedding width")
    group.add_argument("--seed", type=int, help=f"seed for generated weights (default {DEFAULT_SEED})")
    group.add_argument("--lenient", action="store_true",
                       help="round unreachable patch counts up instead of failing")
    if scoring:
        group.add_argument("--scorer", choices=sorted(SCORER_KINDS), help="patch scorer (default pixel-blur)")
        group.add_argument("--extractor", help="feature extractor bundle directory (feature scorer)")
        group.add_argument("--saliency", nargs="+", help="saliency map tensor per image (saliency scorer)")
        group.add_argument("--scoring-scale", type=float, help="image scale for the feature scorer, in (0, 1]")
        group.add_argument("--upsample", choices=UPSAMPLE_MODES, help="blur upsampling mode")
        group.add_argument("--jobs", type=int, default=1, help="images scored in parallel")
    return parent


def _report_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--format", choices=("text", "json"), default="text")
    parent.add_argument("--out", help="write the report here instead of stdout")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadtok",
        description="Saliency-based quadtree tokenization for Vision Transformers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  quadtok tokenize image.ppm --patches 100 --out tokens/
  quadtok score image.ppm --heatmap --out scores/
  quadtok render image.ppm --mosaic tokens/image.mosaic.json --grid --out mosaic.ppm
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    subparsers = parser.add_subparsers(dest="command", title="Available commands")

    p = subparsers.add_parser("tokenize", parents=[_pipeline_flags()], help="image(s) -> mosaic + tokens")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--embedder", help="patch embedder bundle directory (default: seeded init)")
    p.add_argument("--train-grid", type=float, nargs=2, metavar=("GW", "GH"),
                   help="rescale token positions to this training grid")
    p.set_defaults(func=cmd_tokenize)

    p = subparsers.add_parser("render", parents=[_pipeline_flags(scoring=False)],
                              help="visualize a mosaic as the tokenizer sees it")
    p.add_argument("image")
    p.add_argument("--mosaic", required=True, help="mosaic JSON")
    p.add_argument("--mode", choices=UPSAMPLE_MODES, default="nearest")
    p.add_argument("--grid", action="store_true", help="draw 1-px patch borders")
    p.add_argument("--grid-color", default="red", help="#rrggbb, r,g,b or a color name")
    p.add_argument("--out", required=True, help="output PPM")
    p.set_defaults(func=cmd_render)

    p = subparsers.add_parser("score", parents=[_pipeline_flags()], help="score every candidate patch")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--heatmap", action="store_true", help="also write one grayscale PPM per candidate size")
    p.set_defaults(func=cmd_score)

    p = subparsers.add_parser("correlate", parents=[_report_flags()], help="rank correlation between scorers")
    p.add_argument("--set", nargs="+", action="append", required=True, metavar="NAME_OR_FILE",
                   help="scorer name followed by its per-image score files; repeat per scorer")
    p.add_argument("--reference", help="scorer that the others are compared against")
    p.set_defaults(func=cmd_correlate)

    p = subparsers.add_parser("stats", parents=[_pipeline_flags(), _report_flags()],
                              help="area fraction per patch size across patch budgets")
    p.add_argument("images", nargs="+")
    p.add_argument("--targets", type=int, nargs="+", default=list(PATCH_BUDGETS))
    p.add_argument("--csv", help="also write the composition curves as CSV")
    p.set_defaults(func=cmd_stats)

    p = subparsers.add_parser("bench", parents=[_pipeline_flags(), _report_flags()],
                              help="per-component runtime breakdown")
    p.add_argument("images", nargs="+")
    p.add_argument("--weights", help="toy ViT weights bundle (default: seeded init)")
    p.add_argument("--embedder", help="patch embedder bundle directory (default: seeded init)")
    p.add_argument("--model-config", help="JSON file holding a model configuration")
    p.add_argument("--repetitions", type=int, default=BENCH_REPETITIONS)
    p.add_argument("--warmup", type=int, default=BENCH_WARMUP)
    p.add_argument("--no-pin", action="store_true", help="do not pin the process to one CPU")
    p.set_defaults(func=cmd_bench)

    p = subparsers.add_parser("forward", parents=[_pipeline_flags(scoring=False)], help="token file -> logits")
    p.add_argument("tokens", help="token tensor container (L × d_model)")
    p.add_argument("--model-config", help="JSON file holding a model configuration")
    p.add_argument("--weights", help="toy ViT weights bundle (default: seeded init)")
    p.add_argument("--out", help="logits JSON (default: stdout)")
    p.set_defaults(func=cmd_forward)

    p = subparsers.add_parser("export-extractor", help="write the default seeded feature extractor")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_export_extractor)

    p = subparsers.add_parser("init-weights", parents=[_pipeline_flags(scoring=False)],
                              help="write seeded toy ViT weights")
    p.add_argument("--model-config", help="JSON file holding a model configuration")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--embedder-out", help="also write a seeded patch embedder bundle here")
    p.set_defaults(func=cmd_init_weights)

    return parser


def main(argv=None) -> int:
    """Main entry point for the quadtok CLI."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(level=args.log_level)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    try:
        return args.func(args)
    except QuadtokError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return FormatError.exit_code
    except Exception:
        logger.error(f"Unexpected error in {args.command}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
