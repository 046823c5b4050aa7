import json

import numpy as np
import pytest
from pydantic import ValidationError

from quadtok.errors import ContractError, FormatError
from quadtok.pipeline import (
    PipelineConfig,
    RunManifest,
    build_mosaics,
    get_configuration,
    load_pipeline_config,
    make_embedder,
    make_weights,
    run_forward,
    score_images,
    tokenize_image,
    write_token_outputs,
)
from quadtok.scorers import SaliencyMap
from quadtok.tensorio import load_tensor
from quadtok.tokenizer import parse_sidecar

from conftest import random_image


def test_config_sections_must_agree():
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({"quadtree": {"s_min": 8, "s_max": 64}})
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({"scorer": {"s_rep": 8}})
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({"model": {"d_model": 32, "n_heads": 4}})
    cfg = PipelineConfig.model_validate({"model": {"d_model": 32}, "tokenizer": {"d_model": 32}})
    assert cfg.model.d_model == 32


def test_manifest_round_trip(tmp_path):
    manifest = RunManifest(command="tokenize", config=PipelineConfig(), inputs=["a.ppm"], outputs=["a.mosaic.json"])
    path = manifest.write(tmp_path / "manifest.json")
    assert RunManifest.read(path) == manifest
    assert json.loads(path.read_text())["schema_version"] == 1
    (tmp_path / "bad.json").write_text('{"command": 3}')
    with pytest.raises(FormatError):
        RunManifest.read(tmp_path / "bad.json")


def test_load_pipeline_config(tmp_path):
    (tmp_path / "ok.json").write_text('{"quadtree": {"target_patches": 100}}')
    assert load_pipeline_config(tmp_path / "ok.json") == {"quadtree": {"target_patches": 100}}
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(FormatError):
        load_pipeline_config(tmp_path / "list.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(FormatError):
        load_pipeline_config(tmp_path / "broken.json")


def test_mixed_image_sizes_keep_input_order():
    cfg = PipelineConfig()
    imgs = [random_image(256, 256, 1), random_image(128, 256, 2), random_image(256, 256, 3)]
    scores = score_images(imgs, cfg, jobs=2)
    assert [len(s) for s in scores] == [80, 40, 80]
    lenient = cfg.model_copy(update={"strict": False})
    mosaics = build_mosaics(imgs, scores, lenient)
    assert [(m.image_height, m.image_width) for m in mosaics] == [(256, 256), (128, 256), (256, 256)]
    # 128×256 cannot hit 64 exactly; lenient mode overshoots to 65
    assert len(mosaics[0]) == 64 and len(mosaics[1]) == 65


def test_saliency_needs_one_map_per_image():
    cfg = PipelineConfig.model_validate({"scorer": {"kind": "external_saliency"}})
    imgs = [random_image(seed=1), random_image(seed=2)]
    with pytest.raises(ContractError):
        score_images(imgs, cfg, saliency=[SaliencyMap(np.ones((256, 256)))])
    maps = [SaliencyMap(np.ones((256, 256))), SaliencyMap(np.arange(256 * 256, dtype=float).reshape(256, 256))]
    scores = score_images(imgs, cfg, saliency=maps)
    assert scores[0].values.tolist() == [1.0] * 80
    assert not np.all(scores[1].values == scores[1].values[0])


def test_tokenize_image_rescales_positions_for_train_grid():
    img = random_image(seed=5)
    base = PipelineConfig()
    scaled = base.model_copy(update={"train_grid": (8.0, 8.0)})
    mosaic = build_mosaics([img], score_images([img], base), base)[0]
    embedder = make_embedder(base)
    _, seq = tokenize_image(img, mosaic, embedder, base)
    _, scaled_seq = tokenize_image(img, mosaic, embedder, scaled)
    np.testing.assert_allclose(scaled_seq.centers, seq.centers * 0.5)


def test_write_token_outputs_and_forward(tmp_path):
    cfg = PipelineConfig()
    img = random_image(seed=6)
    mosaic = build_mosaics([img], score_images([img], cfg), cfg)[0]
    tokens, seq = tokenize_image(img, mosaic, make_embedder(cfg), cfg)
    names = write_token_outputs(tmp_path / "out", "img", mosaic, tokens, seq)
    assert names == ["img.mosaic.json", "img.tokens.mtok", "img.tokens.json"]
    stored = load_tensor(tmp_path / "out" / "img.tokens.mtok")
    assert stored.shape == (64, 64)
    _, sidecar = parse_sidecar((tmp_path / "out" / "img.tokens.json").read_text())
    assert len(sidecar) == 64
    weights, model_cfg = make_weights(cfg)
    assert run_forward(stored, weights, model_cfg).shape == (10,)


def test_get_configuration():
    info = get_configuration()
    assert info["patch_budgets"][0] == 16
    assert info["defaults"]["quadtree"]["s_min"] == 16
    assert "pixel-blur" in info["scorer_kinds"]
