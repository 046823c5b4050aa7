"""
Pipeline defaults and named configuration registries.
Defaults mirror the main experimental setup: 256² images tokenized with
patch sizes 64², 32² and 16², all represented at 16².
"""

IMAGE_SIZE = 256
S_MIN = 16
S_MAX = 64
S_REP = 16
SCORING_SCALE = 1.0
UPSAMPLE_MODE = "bilinear"
D_MODEL = 64
POS_TEMPERATURE = 10000.0
DEFAULT_SEED = 0

# #Patches values used in experiments; all reachable from the 16-patch grid
PATCH_BUDGETS = (16, 64, 79, 100, 121, 169, 196, 256)

# CLI spelling -> ScorerConfig.kind
SCORER_KINDS = {
    "pixel-blur": "pixel_blur",
    "feature": "feature_based",
    "saliency": "external_saliency",
}

# Desk-scale encoder used by `forward` and `bench` when no config is given
TOY_MODEL = {
    "d_model": D_MODEL,
    "n_heads": 4,
    "n_layers": 2,
    "mlp_ratio": 4,
    "n_classes": 10,
    "layernorm_eps": 1e-6,
}

# Full-size encoders, used only for analytic MAC accounting
VIT_ARCHITECTURES = {
    "small": {"d_model": 384, "n_heads": 6, "n_layers": 12, "mlp_ratio": 4, "n_classes": 1000},
    "base": {"d_model": 768, "n_heads": 12, "n_layers": 12, "mlp_ratio": 4, "n_classes": 1000},
    "large": {"d_model": 1024, "n_heads": 16, "n_layers": 24, "mlp_ratio": 4, "n_classes": 1000},
}

# Default feature extractor: five 3×3 stride-2 convolutions, ×32 downscaling
EXTRACTOR_CHANNELS = (3, 8, 16, 16, 32, 32)
EXTRACTOR_KERNEL = 3
EXTRACTOR_STRIDE = 2
EXTRACTOR_ACTIVATION = "relu"

# Benchmark harness
BENCH_WARMUP = 5
BENCH_REPETITIONS = 30
BENCH_MIN_BATCH_SECONDS = 1e-3
BENCH_MAX_BATCH = 4096

MANIFEST_SCHEMA_VERSION = 1
