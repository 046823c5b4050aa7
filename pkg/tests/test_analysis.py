import json

import numpy as np
import pytest

from quadtok.analysis import (
    AttentionMacs,
    ConvMacs,
    LinearMacs,
    QuadtreeMacs,
    composition_from_scores,
    composition_stats,
    correlate_scorers,
    count_macs,
    extractor_descriptors,
    extractor_macs,
    feature_scorer_macs,
    format_table,
    fraction_closer,
    kendall_tau,
    spearman,
    tokenizer_macs,
    toyvit_macs,
    vit_config,
    vit_macs,
)
from quadtok.errors import ContractError, UnreachableTargetError
from quadtok.extractor import default_extractor_spec
from quadtok.imagecore import Image
from quadtok.quadtree import QuadtreeConfig, candidate_table
from quadtok.scorers import PatchScores, ScorerConfig, make_scorer
from quadtok.toyvit import ModelConfig

from conftest import constant_image, random_image


# ========================
# Brute-force oracles
# ========================
def kendall_oracle(a, b):
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(len(a), k=1)
    n0 = len(upper[0])
    n1 = int(np.sum(sa[upper] == 0))
    n2 = int(np.sum(sb[upper] == 0))
    if n0 == n1 or n0 == n2:
        return None
    return float(np.sum(sa[upper] * sb[upper]) / np.sqrt((n0 - n1) * (n0 - n2)))


def mid_ranks(x):
    below = np.sum(x[None, :] < x[:, None], axis=1)
    equal = np.sum(x[None, :] == x[:, None], axis=1)
    return below + (equal + 1) / 2.0


def spearman_oracle(a, b):
    ra, rb = mid_ranks(a), mid_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denominator = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denominator == 0:
        return None
    return float(np.sum(da * db) / denominator)


def _scores(values):
    values = np.asarray(values, dtype=float)
    patches = np.stack([np.arange(len(values)) * 64, np.zeros(len(values)), np.full(len(values), 64)], axis=1)
    return PatchScores(patches, values)


# ========================
# Rank correlation
# ========================
def test_rank_coefficients_match_brute_force_oracles():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(2, 301))
        levels = int(rng.integers(2, 12)) if trial % 2 else None
        a = rng.integers(0, levels, n).astype(float) if levels else rng.random(n)
        b = rng.integers(0, levels, n).astype(float) if levels else rng.random(n)
        tau, rho = kendall_tau(a, b), spearman(a, b)
        expected_tau, expected_rho = kendall_oracle(a, b), spearman_oracle(a, b)
        if expected_tau is None:
            assert tau is None
        else:
            assert tau == pytest.approx(expected_tau, abs=1e-12)
        if expected_rho is None:
            assert rho is None
        else:
            assert rho == pytest.approx(expected_rho, abs=1e-12)


def test_identical_and_reversed_rankings():
    a = np.random.default_rng(1).random(50)
    assert kendall_tau(a, a) == pytest.approx(1.0)
    assert spearman(a, a) == pytest.approx(1.0)
    assert kendall_tau(a, -a) == pytest.approx(-1.0)
    assert spearman(a, 10 - a) == pytest.approx(-1.0)


def test_degenerate_inputs():
    assert kendall_tau([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None
    assert spearman([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]) is None
    with pytest.raises(ContractError):
        kendall_tau([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ContractError):
        spearman([1.0], [1.0])


def test_patch_scores_are_aligned_before_correlating():
    a = _scores([1.0, 2.0, 3.0, 4.0])
    shuffled = PatchScores(a.patches[::-1], a.values[::-1])
    assert kendall_tau(a, shuffled) == pytest.approx(1.0)


def test_fraction_closer():
    reference = [_scores([1, 2, 3, 4]), _scores([4, 3, 2, 1]), _scores([1, 3, 2, 4])]
    same = [_scores(r.values) for r in reference]
    flipped = [_scores(r.values[::-1]) for r in reference]
    assert fraction_closer(reference, same, flipped) == 1.0
    assert fraction_closer(reference, flipped, same) == 0.0
    assert fraction_closer(reference, same, same, coefficient="spearman") == 0.0
    flat = [_scores([1, 1, 1, 1])] * 3
    assert fraction_closer(reference, flipped, flat) == 1.0
    assert fraction_closer(reference, flat, flipped) == 0.0
    with pytest.raises(ContractError):
        fraction_closer(reference, same[:2], flipped)


def test_correlate_scorers_report():
    img_scores = {
        "oracle": [_scores([1, 2, 3, 4, 5]), _scores([5, 1, 4, 2, 3])],
        "feature": [_scores([1, 2, 3, 5, 4]), _scores([5, 1, 4, 3, 2])],
        "pixel": [_scores([5, 4, 3, 2, 1]), _scores([1, 5, 2, 4, 3])],
    }
    report = correlate_scorers(img_scores, reference="oracle")
    assert report.n_images == 2 and report.n_candidates == 5
    assert [(p.a, p.b) for p in report.pairs] == [("oracle", "feature"), ("oracle", "pixel"), ("feature", "pixel")]
    assert report.pairs[1].kendall == [pytest.approx(-1.0), pytest.approx(-1.0)]
    assert len(report.closer) == 4
    closer = {(c.a, c.b, c.coefficient): c.fraction for c in report.closer}
    assert closer[("feature", "pixel", "kendall")] == 1.0
    assert closer[("pixel", "feature", "spearman")] == 0.0
    assert json.loads(report.to_json())["reference"] == "oracle"
    assert "fraction" in report.to_text()
    with pytest.raises(ContractError):
        correlate_scorers(img_scores, reference="gradcam")
    with pytest.raises(ContractError):
        correlate_scorers({"only": img_scores["oracle"]})


def test_format_table():
    text = format_table(["name", "value"], [("a", 0.5), ("bb", None)])
    assert text.splitlines() == ["name     value", "   a  0.500000", "  bb         -"]


# ========================
# Composition
# ========================
def test_composition_extremes():
    scorer = make_scorer(ScorerConfig())
    imgs = [random_image(seed=s) for s in range(3)]
    report = composition_stats(imgs, [16, 256], scorer)
    assert report.sizes == [64, 32, 16]
    assert report.rows[0].fractions == {64: 1.0, 32: 0.0, 16: 0.0}
    assert report.rows[1].fractions == {64: 0.0, 32: 0.0, 16: 1.0}
    constant = composition_stats([constant_image()], [64], scorer)
    assert constant.rows[0].fractions[32] == 1.0


def test_composition_is_invariant_to_a_nearest_upscale():
    scorer = make_scorer(ScorerConfig(upsample_mode="nearest"))
    targets = [16, 40, 64, 100, 169, 196, 256]
    smalls = [random_image(256, 256, s) for s in range(4)]
    larges = [Image.from_bytes(np.repeat(np.repeat(img.to_bytes(), 2, axis=0), 2, axis=1)) for img in smalls]
    small = composition_stats(smalls, targets, scorer, QuadtreeConfig(s_min=16, s_max=64))
    large = composition_stats(larges, targets, scorer, QuadtreeConfig(s_min=32, s_max=128))
    assert large.sizes == [2 * s for s in small.sizes]
    for row_small, row_large in zip(small.rows, large.rows):
        for size in small.sizes:
            assert row_large.fractions[2 * size] == pytest.approx(row_small.fractions[size], abs=1e-12)


def test_composition_from_precomputed_scores():
    cfg = QuadtreeConfig()
    candidates = candidate_table(256, 256, 16, 64).candidates
    rng = np.random.default_rng(3)
    scores = [PatchScores(candidates, rng.random(len(candidates))) for _ in range(3)]
    report = composition_from_scores(scores, 256, 256, [64, 100], cfg)
    for row in report.rows:
        assert sum(row.fractions.values()) == pytest.approx(1.0)
        assert row.n_images == 3
    assert report.to_csv().splitlines()[0] == "L,frac64,frac32,frac16"
    with pytest.raises(UnreachableTargetError):
        composition_from_scores(scores, 256, 256, [65], cfg)
    lenient = composition_from_scores(scores, 256, 256, [65], cfg, strict=False)
    assert lenient.rows[0].target_patches == 65


# ========================
# MAC accounting
# ========================
@pytest.mark.parametrize(
    "descriptor, macs",
    [
        (ConvMacs(height=256, width=256, in_channels=3, out_channels=8, kernel=3, stride=2), 3_538_944),
        (LinearMacs(in_features=768, out_features=64, tokens=100), 4_915_200),
        (AttentionMacs(tokens=65, d_model=64), 1_605_760),
        (AttentionMacs(tokens=10, d_model=8, projections=False), 1_600),
        (QuadtreeMacs(), 0),
    ],
)
def test_count_macs_fixtures(descriptor, macs):
    assert count_macs(descriptor) == macs


def test_count_macs_accepts_mappings():
    assert count_macs({"kind": "linear", "in_features": 2, "out_features": 3}) == 6
    with pytest.raises(ContractError):
        count_macs({"kind": "pooling"})


def test_extractor_and_scorer_macs():
    spec = default_extractor_spec(0)
    expected = 3_538_944 + 4_718_592 + 2_359_296 + 1_179_648 + 589_824
    assert extractor_macs(spec, 256, 256) == expected
    assert feature_scorer_macs(spec, 256, 256, n_sizes=2) == 3 * expected


def test_encoder_macs():
    assert toyvit_macs(ModelConfig(), 100) == 2 * 6_270_080 + 640


def test_vit_large_gmacs():
    assert vit_macs("large", 64) / 1e9 == pytest.approx(19.9, rel=0.01)
    assert vit_macs("large", 196) / 1e9 == pytest.approx(61.7, rel=0.01)
    assert vit_macs("base", 196) < vit_macs("large", 196)
    with pytest.raises(ContractError):
        vit_macs("huge", 64)


def test_mac_counts_are_additive():
    whole = count_macs(LinearMacs(in_features=768, out_features=64, tokens=100))
    assert whole == count_macs(LinearMacs(in_features=768, out_features=64, tokens=37)) + count_macs(
        LinearMacs(in_features=768, out_features=64, tokens=63)
    )
    conv = dict(height=64, width=64, in_channels=3, kernel=3, stride=2)
    assert count_macs(ConvMacs(out_channels=8, **conv)) == count_macs(ConvMacs(out_channels=3, **conv)) + count_macs(
        ConvMacs(out_channels=5, **conv)
    )
    spec = default_extractor_spec(0)
    assert extractor_macs(spec, 128, 96) == sum(count_macs(d) for d in extractor_descriptors(spec, 128, 96))
    for name in ("base", "large"):
        cfg = vit_config(name)
        assert vit_macs(name, 196) == tokenizer_macs(196, 768, cfg.d_model) + toyvit_macs(cfg, 196)


def test_fraction_closer_wins_are_exclusive():
    rng = np.random.default_rng(21)
    reference = [_scores(rng.random(12)) for _ in range(20)]
    a = [_scores(rng.random(12)) for _ in range(20)]
    b = [_scores(rng.integers(0, 3, 12)) for _ in range(19)] + [_scores(np.ones(12))]
    for coefficient in ("kendall", "spearman"):
        forward = fraction_closer(reference, a, b, coefficient)
        backward = fraction_closer(reference, b, a, coefficient)
        assert forward + backward <= 1.0
        assert fraction_closer(reference, a, a, coefficient) == 0.0
