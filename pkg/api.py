"""
FastAPI server that exposes the tokenization pipeline as REST endpoints.
Images are sent as raw binary PPM request bodies; settings as query parameters.
"""
from typing import Any, Dict

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.middleware.cors import CORSMiddleware

from api_config import (
    API_DESCRIPTION,
    API_HOST,
    API_PORT,
    API_TITLE,
    API_VERSION,
    CORS_CREDENTIALS,
    CORS_HEADERS,
    CORS_METHODS,
    CORS_ORIGINS,
    ENABLE_CORS,
    MAX_BODY_BYTES,
    MAX_PATCHES,
)
from config import DEFAULT_SEED, PATCH_BUDGETS, S_MAX, S_MIN, S_REP, SCORER_KINDS, SCORING_SCALE, UPSAMPLE_MODE
from logging_config import get_logger, setup_logging
from quadtok.imagecore import Image, decode_ppm
from quadtok.pipeline import (
    PipelineConfig,
    build_mosaics,
    feature_extractor,
    get_configuration,
    make_embedder,
    score_images,
    tokenize_image,
)
from quadtok.quadtree import QuadtreeConfig, candidate_table

logger = get_logger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title=API_TITLE,
    description=API_DESCRIPTION,
    version=API_VERSION
)

# Add CORS middleware for UI integration
if ENABLE_CORS:
    app.add_middleware(
        CORSMiddleware,
        allow_origins=CORS_ORIGINS,
        allow_credentials=CORS_CREDENTIALS,
        allow_methods=CORS_METHODS,
        allow_headers=CORS_HEADERS,
    )


async def _read_image(request: Request) -> Image:
    body = await request.body()
    if len(body) > MAX_BODY_BYTES:
        raise HTTPException(status_code=413, detail=f"Request body exceeds {MAX_BODY_BYTES} bytes")
    return decode_ppm(body)


def _pipeline_config(patches: int, scorer: str, s_min: int, s_max: int, s_rep: int,
                     scoring_scale: float, upsample: str, seed: int) -> PipelineConfig:
    if scorer not in SCORER_KINDS or SCORER_KINDS[scorer] == "external_saliency":
        raise ValueError(f"Scorer '{scorer}' not available over HTTP; use pixel-blur or feature")
    return PipelineConfig.model_validate({
        "quadtree": {"s_min": s_min, "s_max": s_max, "target_patches": patches},
        "scorer": {"kind": SCORER_KINDS[scorer], "s_rep": s_rep, "scoring_scale": scoring_scale,
                   "upsample_mode": upsample},
        "tokenizer": {"s_rep": s_rep, "s_min": s_min},
        "seed": seed,
    })


def _score(img: Image, cfg: PipelineConfig):
    extractor = feature_extractor(seed=cfg.seed) if cfg.scorer.kind == "feature_based" else None
    return score_images([img], cfg, extractor=extractor)[0]


def _mosaic(img: Image, cfg: PipelineConfig):
    return build_mosaics([img], [_score(img, cfg)], cfg)[0]


def _tokenize(img: Image, cfg: PipelineConfig) -> dict:
    mosaic = _mosaic(img, cfg)
    tokens, seq = tokenize_image(img, mosaic, make_embedder(cfg), cfg)
    return {"mosaic": mosaic.to_dict(), "sequence": seq.sidecar(), "tokens": tokens.tolist()}


# ========================
# Health & Info Endpoints
# ========================
@app.get("/health")
async def health_check() -> Dict[str, str]:
    """Health check endpoint"""
    logger.debug("Health check requested")
    return {"status": "healthy"}


@app.get("/")
async def root() -> Dict[str, str]:
    """Root endpoint with API information"""
    return {
        "service": API_TITLE,
        "version": API_VERSION,
        "docs": "/docs",
        "status": "running"
    }


# ========================
# Configuration Endpoints
# ========================
@app.get("/api/v1/configuration")
async def get_pipeline_configuration() -> Dict[str, Any]:
    """Pipeline defaults, patch budgets and scorer kinds."""
    try:
        logger.info("Pipeline configuration requested")
        return {"success": True, "data": get_configuration()}
    except Exception as e:
        logger.error("Error fetching pipeline configuration", exc_info=True)
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/api/v1/candidates")
async def get_candidates(
    height: int = Query(..., ge=1),
    width: int = Query(..., ge=1),
    s_min: int = Query(S_MIN, ge=1),
    s_max: int = Query(S_MAX, ge=1),
) -> Dict[str, Any]:
    """Every splittable candidate patch for an image size, coarse-to-fine."""
    try:
        logger.info(f"Candidates requested for {height}x{width}")
        cfg = QuadtreeConfig(s_min=s_min, s_max=s_max)
        candidates = candidate_table(height, width, cfg.s_min, cfg.s_max).candidates
        return {"success": True, "data": {"count": len(candidates), "patches": candidates.tolist()}}
    except ValueError as e:
        logger.warning(f"Invalid candidate request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception:
        logger.error("Error listing candidates", exc_info=True)
        raise HTTPException(status_code=500, detail="Error listing candidates")


# ========================
# Pipeline Operations
# ========================
@app.post("/api/v1/score")
async def score_candidates(
    request: Request,
    scorer: str = Query("pixel-blur"),
    s_min: int = Query(S_MIN, ge=1),
    s_max: int = Query(S_MAX, ge=1),
    s_rep: int = Query(S_REP, ge=1),
    scoring_scale: float = Query(SCORING_SCALE, gt=0.0, le=1.0),
    upsample: str = Query(UPSAMPLE_MODE),
    seed: int = Query(DEFAULT_SEED),
) -> Dict[str, Any]:
    """Saliency score of every candidate patch of the posted image."""
    img = await _read_image_or_400(request)
    try:
        logger.info(f"Scoring requested ({scorer}) for {img.height}x{img.width}")
        cfg = _pipeline_config(PATCH_BUDGETS[0], scorer, s_min, s_max, s_rep, scoring_scale, upsample, seed)
        scores = await run_in_threadpool(_score, img, cfg)
        return {"success": True, "data": scores.to_dict()}
    except ValueError as e:
        logger.warning(f"Invalid scoring request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception:
        logger.error("Error scoring patches", exc_info=True)
        raise HTTPException(status_code=500, detail="Error scoring patches")


@app.post("/api/v1/mosaic")
async def get_mosaic(
    request: Request,
    patches: int = Query(PATCH_BUDGETS[1], ge=1, le=MAX_PATCHES),
    scorer: str = Query("pixel-blur"),
    s_min: int = Query(S_MIN, ge=1),
    s_max: int = Query(S_MAX, ge=1),
    s_rep: int = Query(S_REP, ge=1),
    scoring_scale: float = Query(SCORING_SCALE, gt=0.0, le=1.0),
    upsample: str = Query(UPSAMPLE_MODE),
    seed: int = Query(DEFAULT_SEED),
) -> Dict[str, Any]:
    """Patch mosaic with exactly ``patches`` patches for the posted image."""
    img = await _read_image_or_400(request)
    try:
        logger.info(f"Mosaic requested ({patches} patches, {scorer}) for {img.height}x{img.width}")
        cfg = _pipeline_config(patches, scorer, s_min, s_max, s_rep, scoring_scale, upsample, seed)
        mosaic = await run_in_threadpool(_mosaic, img, cfg)
        return {"success": True, "data": mosaic.to_dict()}
    except ValueError as e:
        logger.warning(f"Invalid mosaic request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception:
        logger.error("Error building mosaic", exc_info=True)
        raise HTTPException(status_code=500, detail="Error building mosaic")


@app.post("/api/v1/tokenize")
async def tokenize(
    request: Request,
    patches: int = Query(PATCH_BUDGETS[1], ge=1, le=MAX_PATCHES),
    scorer: str = Query("pixel-blur"),
    s_min: int = Query(S_MIN, ge=1),
    s_max: int = Query(S_MAX, ge=1),
    s_rep: int = Query(S_REP, ge=1),
    scoring_scale: float = Query(SCORING_SCALE, gt=0.0, le=1.0),
    upsample: str = Query(UPSAMPLE_MODE),
    seed: int = Query(DEFAULT_SEED),
) -> Dict[str, Any]:
    """Mosaic, per-token metadata and the embedded token matrix for the posted image."""
    img = await _read_image_or_400(request)
    try:
        logger.info(f"Tokenization requested ({patches} patches, {scorer}) for {img.height}x{img.width}")
        cfg = _pipeline_config(patches, scorer, s_min, s_max, s_rep, scoring_scale, upsample, seed)
        result = await run_in_threadpool(_tokenize, img, cfg)
        return {"success": True, "data": result}
    except ValueError as e:
        logger.warning(f"Invalid tokenization request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception:
        logger.error("Error tokenizing image", exc_info=True)
        raise HTTPException(status_code=500, detail="Error tokenizing image")


async def _read_image_or_400(request: Request) -> Image:
    try:
        return await _read_image(request)
    except ValueError as e:
        logger.warning(f"Unreadable image body: {e}")
        raise HTTPException(status_code=400, detail=str(e))


if __name__ == "__main__":
    import uvicorn

    setup_logging()
    logger.info(f"Starting FastAPI server on {API_HOST}:{API_PORT}")

    uvicorn.run(
        app,
        host=API_HOST,
        port=API_PORT,
        log_config=None  # Use our custom logging
    )
