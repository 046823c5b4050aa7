import math

import numpy as np
import pytest

from quadtok.errors import ContractError, DimensionError, FormatError
from quadtok.extractor import (
    FeatureExtractorSpec,
    FeatureMap,
    conv2d,
    default_extractor_spec,
    extract_features,
    identity_extractor,
    run_extractor,
)
from quadtok.imagecore import Image, blur_array
from quadtok.quadtree import PatchRect, candidate_table
from quadtok.scorers import (
    PatchScores,
    SaliencyMap,
    ScorerConfig,
    make_scorer,
    roi_slice,
    score_feature_based,
    score_from_saliency_map,
    score_pixel_blur,
)

from conftest import constant_image, random_image, tiny_extractor


def _candidates(height=256, width=256, s_min=16, s_max=64):
    return candidate_table(height, width, s_min, s_max).candidates


# ========================
# Loop oracles
# ========================
def _loop_downsample(patch, factor):
    n = patch.shape[0] // factor
    out = np.zeros((n, n, 3))
    for i in range(n):
        for j in range(n):
            for c in range(3):
                total = 0.0
                for dy in range(factor):
                    for dx in range(factor):
                        total += patch[i * factor + dy, j * factor + dx, c]
                out[i, j, c] = total / (factor * factor)
    return out


def _source_taps(n_in, n_out, o):
    coord = min(max((o + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
    lo = math.floor(coord)
    return lo, min(lo + 1, n_in - 1), coord - lo


def _loop_upsample(small, factor, mode):
    n = small.shape[0]
    out = np.zeros((n * factor, n * factor, 3))
    for i in range(n * factor):
        for j in range(n * factor):
            if mode == "nearest":
                out[i, j] = small[i // factor, j // factor]
                continue
            y0, y1, ty = _source_taps(n, n * factor, i)
            x0, x1, tx = _source_taps(n, n * factor, j)
            top = small[y0, x0] * (1 - tx) + small[y0, x1] * tx
            bottom = small[y1, x0] * (1 - tx) + small[y1, x1] * tx
            out[i, j] = top * (1 - ty) + bottom * ty
    return out


def pixel_blur_oracle(img, candidates, s_rep, mode):
    arr = img.data.astype(np.float64)
    values = []
    for x, y, size in candidates.tolist():
        patch = arr[y:y + size, x:x + size]
        factor = size // s_rep
        blurred = _loop_upsample(_loop_downsample(patch, factor), factor, mode)
        values.append(np.mean((patch - blurred) ** 2))
    return np.asarray(values)


def _loop_conv(x, weight, bias, stride):
    k = weight.shape[-1]
    before = (k - stride) // 2
    after = k - stride - before
    padded = np.pad(x, ((before, after), (before, after), (0, 0)))
    h, w = x.shape[0] // stride, x.shape[1] // stride
    out = np.zeros((h, w, weight.shape[0]))
    for i in range(h):
        for j in range(w):
            window = padded[i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[i, j] = np.einsum("ijc,ocij->o", window, weight) + bias
    return out


def _loop_features(arr, spec):
    x = arr
    for layer, weight, bias in zip(spec.layers, spec.weights, spec.biases):
        x = _loop_conv(x, weight, bias, layer.stride)
        if layer.activation == "relu":
            x = np.maximum(x, 0.0)
    return x


# ========================
# Pixel blur
# ========================
@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_pixel_blur_matches_loop_oracle(mode):
    img = random_image(128, 128, seed=5)
    candidates = _candidates(128, 128)
    scores = score_pixel_blur(img, candidates, ScorerConfig(upsample_mode=mode))
    np.testing.assert_allclose(scores.values, pixel_blur_oracle(img, candidates, 16, mode), rtol=1e-10)


def test_constant_image_scores_zero():
    scores = score_pixel_blur(constant_image(), _candidates(), ScorerConfig())
    assert len(scores) == 80
    assert scores.values.tolist() == [0.0] * 80


def test_pixel_blur_rejects_candidates_at_representation_size():
    with pytest.raises(DimensionError):
        score_pixel_blur(random_image(64, 64), np.array([[0, 0, 16]]), ScorerConfig())


# ========================
# Feature based
# ========================
def test_conv2d_matches_loop_oracle():
    spec = tiny_extractor()
    x = np.random.default_rng(2).random((16, 24, 3))
    np.testing.assert_allclose(
        conv2d(x, spec.weights[0], spec.biases[0], 2), _loop_conv(x, spec.weights[0], spec.biases[0], 2), rtol=1e-12
    )


def test_feature_scores_match_materialized_maps_oracle():
    spec = tiny_extractor()
    img = random_image(128, 128, seed=9)
    candidates = _candidates(128, 128)
    cfg = ScorerConfig(kind="feature_based")
    scores = score_feature_based(img, candidates, spec, cfg)

    arr = img.data.astype(np.float64)
    original = _loop_features(arr, spec)
    blurred_by_size = {size: _loop_features(blur_array(arr, size // 16, "bilinear"), spec) for size in (64, 32)}
    r = spec.downscale_ratio
    expected = []
    for x, y, size in candidates.tolist():
        blurred = blurred_by_size[size]
        cells = np.s_[y // r:(y + size) // r, x // r:(x + size) // r]
        expected.append(np.mean((blurred[cells] - original[cells]) ** 2))
    np.testing.assert_allclose(scores.values, expected, rtol=1e-5)


def test_identity_extractor_reduces_to_pixel_blur_exactly():
    candidates = _candidates()
    for seed in range(3):
        img = random_image(seed=seed)
        pixel = score_pixel_blur(img, candidates, ScorerConfig(upsample_mode="nearest"))
        feature = score_feature_based(
            img, candidates, identity_extractor(), ScorerConfig(kind="feature_based", upsample_mode="nearest")
        )
        assert np.array_equal(pixel.values, feature.values)


def test_misaligned_candidates_pool_over_pixel_footprint():
    spec = default_extractor_spec(0)
    img = random_image(128, 128, seed=4)
    candidates = _candidates(128, 128, s_min=8, s_max=32)
    scores = score_feature_based(img, candidates, spec, ScorerConfig(kind="feature_based", s_rep=8))

    arr = img.data.astype(np.float64)
    original = run_extractor(arr, spec)
    cell_maps = {
        size: np.mean((run_extractor(blur_array(arr, size // 8, "bilinear"), spec) - original) ** 2, axis=2)
        for size in (32, 16)
    }
    assert sorted(set(candidates[:, 2].tolist())) == [16, 32]
    # every candidate lies inside a single ×32 feature cell
    for (x, y, size), value in zip(candidates.tolist(), scores.values.tolist()):
        assert value == pytest.approx(cell_maps[size][y // 32, x // 32], rel=1e-9)


def test_reduced_scoring_scale_gives_valid_scores():
    spec = default_extractor_spec(0)
    img = random_image(seed=6)
    candidates = _candidates()
    full = score_feature_based(img, candidates, spec, ScorerConfig(kind="feature_based"))
    reduced = score_feature_based(img, candidates, spec, ScorerConfig(kind="feature_based", scoring_scale=0.75))
    assert len(reduced) == len(full) == 80
    assert np.all(np.isfinite(reduced.values)) and (reduced.values >= 0).all()
    with pytest.raises(DimensionError):
        score_feature_based(img, candidates, spec, ScorerConfig(kind="feature_based", scoring_scale=0.7))


def test_extract_features_grid():
    fm = extract_features(random_image(seed=8), default_extractor_spec(0))
    assert fm.downscale_ratio == 32
    assert fm.data.shape == (8, 8, 32)
    assert (fm.data >= 0).all()


def test_roi_slice_alignment():
    fm = FeatureMap(np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2), 8)
    assert roi_slice(fm, PatchRect(8, 16, 16)).shape == (2, 2, 2)
    with pytest.raises(DimensionError):
        roi_slice(fm, PatchRect(4, 0, 8))
    assert roi_slice(fm, PatchRect(4, 0, 8), strict=False).shape == (1, 2, 2)


def test_feature_map_ratio_is_inferred():
    assert FeatureMap.from_array(np.zeros((8, 8, 3)), 256, 256).downscale_ratio == 32
    with pytest.raises(DimensionError):
        FeatureMap.from_array(np.zeros((8, 4, 3)), 256, 256)
    with pytest.raises(FormatError):
        FeatureMap.from_array(np.zeros((8, 8)), 256, 256)


def test_default_extractor_is_seeded_and_round_trips(tmp_path):
    spec = default_extractor_spec(3)
    assert spec.downscale_ratio == 32
    assert spec.depth == 32
    assert all(np.array_equal(a, b) for a, b in zip(spec.weights, default_extractor_spec(3).weights))
    assert not np.array_equal(spec.weights[0], default_extractor_spec(4).weights[0])
    spec.save(tmp_path / "ext")
    loaded = FeatureExtractorSpec.load(tmp_path / "ext")
    assert loaded.layers == spec.layers
    assert all(np.array_equal(a, b) for a, b in zip(loaded.weights, spec.weights))


def test_extractor_rejects_inconsistent_channels():
    spec = tiny_extractor()
    with pytest.raises(DimensionError):
        FeatureExtractorSpec(spec.layers[1:], spec.weights[1:], spec.biases[1:])


# ========================
# External saliency
# ========================
def test_saliency_scores_are_footprint_means():
    data = np.random.default_rng(1).random((256, 256))
    candidates = _candidates()
    scores = score_from_saliency_map(SaliencyMap(data), candidates)
    for (x, y, size), value in zip(candidates.tolist(), scores.values.tolist()):
        assert value == pytest.approx(data[y:y + size, x:x + size].mean(), rel=1e-12)


def test_low_resolution_saliency_is_expanded():
    coarse = np.random.default_rng(2).random((16, 16))
    full = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)
    candidates = _candidates()
    a = score_from_saliency_map(SaliencyMap(coarse), candidates, 256, 256)
    b = score_from_saliency_map(SaliencyMap(full), candidates, 256, 256)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12)
    with pytest.raises(DimensionError):
        score_from_saliency_map(SaliencyMap(np.ones((10, 16))), candidates, 256, 256)


def test_saliency_map_validation():
    with pytest.raises(ContractError):
        SaliencyMap(-np.ones((4, 4)))
    assert SaliencyMap(np.ones((4, 4, 1))).data.shape == (4, 4)


def test_make_scorer_requires_inputs():
    with pytest.raises(ContractError):
        make_scorer(ScorerConfig(kind="feature_based"))
    with pytest.raises(ContractError):
        make_scorer(ScorerConfig(kind="external_saliency"))
    scorer = make_scorer(ScorerConfig(kind="external_saliency"), saliency=SaliencyMap(np.ones((256, 256))))
    assert scorer(random_image(), _candidates()).values.tolist() == [1.0] * 80


# ========================
# PatchScores
# ========================
def test_patch_scores_json_and_alignment():
    candidates = _candidates()
    scores = score_pixel_blur(random_image(seed=2), candidates, ScorerConfig())
    text = scores.to_json()
    assert PatchScores.from_json(text) == scores
    assert PatchScores.from_json(text).to_json() == text
    reversed_patches = candidates[::-1]
    assert np.array_equal(scores.aligned_to(reversed_patches), scores.values[::-1])
    with pytest.raises(ContractError):
        scores.aligned_to(np.array([[0, 0, 128]]))


def test_patch_scores_validation():
    with pytest.raises(ContractError):
        PatchScores(np.array([[0, 0, 64]]), np.array([-1.0]))
    with pytest.raises(ContractError):
        PatchScores(np.array([[0, 0, 64]]), np.array([1.0, 2.0]))
    with pytest.raises(FormatError):
        PatchScores.from_json('{"patches": []}')


def test_saliency_pooling_is_linear_in_the_map():
    rng = np.random.default_rng(3)
    a, b = rng.random((256, 256)), rng.random((256, 256))
    candidates = _candidates()
    pooled_a = score_from_saliency_map(SaliencyMap(a), candidates).values
    pooled_b = score_from_saliency_map(SaliencyMap(b), candidates).values
    mixed = score_from_saliency_map(SaliencyMap(2.0 * a + 0.75 * b), candidates).values
    np.testing.assert_allclose(mixed, 2.0 * pooled_a + 0.75 * pooled_b, rtol=1e-12)


def test_pixel_blur_is_zero_exactly_on_block_constant_patches():
    cfg = ScorerConfig(upsample_mode="nearest")
    coarse = np.random.default_rng(8).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    raster = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)
    candidates = _candidates()
    assert score_pixel_blur(Image.from_bytes(raster), candidates, cfg).values.tolist() == [0.0] * 80

    raster[0, 0, 0] = (int(raster[0, 0, 0]) + 128) % 256
    scores = score_pixel_blur(Image.from_bytes(raster), candidates, cfg)
    holds_origin = (candidates[:, 0] == 0) & (candidates[:, 1] == 0)
    assert (scores.values[holds_origin] > 0).all()
    assert (scores.values[~holds_origin] == 0).all()
