import json

import numpy as np
import pytest

import cli
from quadtok.imagecore import load_ppm, save_ppm
from quadtok.quadtree import PatchMosaic
from quadtok.scorers import PatchScores
from quadtok.tensorio import load_tensor, save_tensor

from conftest import random_image


@pytest.fixture
def ppm(tmp_path):
    path = tmp_path / "img.ppm"
    save_ppm(random_image(seed=11), path)
    return path


@pytest.fixture
def two_ppms(tmp_path):
    paths = []
    for i, seed in enumerate((21, 22)):
        path = tmp_path / f"img{i}.ppm"
        save_ppm(random_image(seed=seed), path)
        paths.append(path)
    return paths


def _mosaic(directory, stem="img") -> PatchMosaic:
    return PatchMosaic.from_json((directory / f"{stem}.mosaic.json").read_text())


# ========================
# tokenize
# ========================
def test_tokenize_writes_outputs_and_manifest(ppm, tmp_path):
    out = tmp_path / "tokens"
    assert cli.main(["tokenize", str(ppm), "--patches", "64", "--out", str(out)]) == 0
    assert len(_mosaic(out)) == 64
    assert load_tensor(out / "img.tokens.mtok").shape == (64, 64)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "tokenize"
    assert manifest["config"]["quadtree"]["target_patches"] == 64
    assert manifest["outputs"] == ["img.mosaic.json", "img.tokens.mtok", "img.tokens.json"]


def test_tokenize_is_reproducible(ppm, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["tokenize", str(ppm), "--patches", "100", "--out", str(tmp_path / name)]) == 0
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_config_file_and_flag_precedence(ppm, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"quadtree": {"target_patches": 100}, "seed": 3}))
    assert cli.main(["tokenize", str(ppm), "--config", str(config), "--out", str(tmp_path / "file")]) == 0
    assert len(_mosaic(tmp_path / "file")) == 100
    assert cli.main(["tokenize", str(ppm), "--config", str(config), "--patches", "16",
                     "--out", str(tmp_path / "flag")]) == 0
    assert len(_mosaic(tmp_path / "flag")) == 16
    manifest = json.loads((tmp_path / "flag" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3


def test_shared_settings_propagate(ppm, tmp_path):
    out = tmp_path / "tokens"
    assert cli.main(["tokenize", str(ppm), "--s-rep", "8", "--d-model", "32", "--patches", "16", "--out", str(out)]) == 0
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert config["tokenizer"]["s_rep"] == config["scorer"]["s_rep"] == 8
    assert config["model"]["d_model"] == 32
    assert load_tensor(out / "img.tokens.mtok").shape == (16, 32)


def test_unreachable_target(ppm, tmp_path):
    assert cli.main(["tokenize", str(ppm), "--patches", "65", "--out", str(tmp_path / "strict")]) == 4
    assert cli.main(["tokenize", str(ppm), "--patches", "65", "--lenient", "--out", str(tmp_path / "lenient")]) == 0
    assert len(_mosaic(tmp_path / "lenient")) == 67


def test_feature_scorer_with_exported_extractor(ppm, tmp_path):
    assert cli.main(["tokenize", str(ppm), "--scorer", "feature", "--out", str(tmp_path / "none")]) == 4
    assert cli.main(["export-extractor", "--out", str(tmp_path / "ext")]) == 0
    assert cli.main(["tokenize", str(ppm), "--scorer", "feature", "--extractor", str(tmp_path / "ext"),
                     "--out", str(tmp_path / "tokens")]) == 0
    assert len(_mosaic(tmp_path / "tokens")) == 64


def test_saliency_scorer(ppm, tmp_path):
    saliency = tmp_path / "map.mtok"
    data = np.zeros((256, 256))
    data[:64, :64] = 1.0
    save_tensor(data, saliency)
    assert cli.main(["tokenize", str(ppm), "--scorer", "saliency", "--patches", "16",
                     "--out", str(tmp_path / "missing")]) == 4
    assert cli.main(["tokenize", str(ppm), "--scorer", "saliency", "--saliency", str(saliency), "--patches", "19",
                     "--out", str(tmp_path / "tokens")]) == 0
    patches = _mosaic(tmp_path / "tokens").patches.tolist()
    assert [0, 0, 32] in patches and [64, 0, 64] in patches


# ========================
# Exit codes
# ========================
def test_bad_inputs_exit_codes(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n2 2\n255\n")
    assert cli.main(["tokenize", str(bad), "--out", str(tmp_path / "a")]) == 3
    assert cli.main(["tokenize", str(tmp_path / "missing.ppm"), "--out", str(tmp_path / "b")]) == 3


def test_usage_exit_codes(ppm, tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["tokenize", str(ppm), "--bogus", "--out", str(tmp_path)]) == 2
    assert cli.main(["tokenize", str(ppm), "--patches", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["tokenize", str(ppm), "--s-max", "48", "--out", str(tmp_path)]) == 2
    assert cli.main(["--version"]) == 0


# ========================
# score / render
# ========================
def test_score_with_heatmaps(ppm, tmp_path):
    out = tmp_path / "scores"
    assert cli.main(["score", str(ppm), "--heatmap", "--out", str(out)]) == 0
    scores = PatchScores.from_json((out / "img.scores.json").read_text())
    assert len(scores) == 80
    assert (scores.values >= 0).all()
    for size in (64, 32):
        assert load_ppm(out / f"img.heat{size}.ppm").shape == (256, 256, 3)
    assert json.loads((out / "manifest.json").read_text())["outputs"][0] == "img.scores.json"


def test_render_full_split_reproduces_image(ppm, tmp_path):
    assert cli.main(["tokenize", str(ppm), "--patches", "256", "--out", str(tmp_path / "tokens")]) == 0
    out = tmp_path / "render" / "mosaic.ppm"
    assert cli.main(["render", str(ppm), "--mosaic", str(tmp_path / "tokens" / "img.mosaic.json"),
                     "--out", str(out)]) == 0
    assert load_ppm(out) == load_ppm(ppm)
    assert (tmp_path / "render" / "mosaic.ppm.manifest.json").exists()


def test_render_grid(ppm, tmp_path):
    assert cli.main(["tokenize", str(ppm), "--patches", "16", "--out", str(tmp_path / "tokens")]) == 0
    out = tmp_path / "grid.ppm"
    assert cli.main(["render", str(ppm), "--mosaic", str(tmp_path / "tokens" / "img.mosaic.json"),
                     "--grid", "--grid-color", "#00ff00", "--out", str(out)]) == 0
    assert load_ppm(out).data[0, 0].tolist() == [0.0, 1.0, 0.0]
    assert cli.main(["render", str(ppm), "--mosaic", str(tmp_path / "tokens" / "img.mosaic.json"),
                     "--grid", "--grid-color", "mauve-ish", "--out", str(out)]) == 3


# ========================
# correlate / stats
# ========================
def test_correlate_two_scorers(two_ppms, tmp_path):
    assert cli.main(["score", *map(str, two_ppms), "--out", str(tmp_path / "blur")]) == 0
    maps = []
    for i in range(2):
        path = tmp_path / f"map{i}.mtok"
        save_tensor(np.random.default_rng(i).random((256, 256)), path)
        maps.append(str(path))
    assert cli.main(["score", *map(str, two_ppms), "--scorer", "saliency", "--saliency", *maps,
                     "--out", str(tmp_path / "sal")]) == 0
    report_path = tmp_path / "report.json"
    argv = ["correlate", "--set", "blur", str(tmp_path / "blur" / "img0.scores.json"),
            str(tmp_path / "blur" / "img1.scores.json"),
            "--set", "sal", str(tmp_path / "sal" / "img0.scores.json"), str(tmp_path / "sal" / "img1.scores.json"),
            "--format", "json", "--out", str(report_path)]
    assert cli.main(argv) == 0
    report = json.loads(report_path.read_text())
    assert report["n_images"] == 2 and report["n_candidates"] == 80
    assert len(report["pairs"]) == 1
    assert all(-1.0 <= tau <= 1.0 for tau in report["pairs"][0]["kendall"])
    assert cli.main(["correlate", "--set", "blur", str(tmp_path / "blur" / "img0.scores.json")]) == 4


def test_stats_with_csv(two_ppms, tmp_path):
    csv_path = tmp_path / "curves.csv"
    report_path = tmp_path / "stats.json"
    assert cli.main(["stats", *map(str, two_ppms), "--targets", "16", "64", "256", "--csv", str(csv_path),
                     "--format", "json", "--out", str(report_path)]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "L,frac64,frac32,frac16"
    assert lines[1].startswith("16,1.0,")
    assert len(lines) == 4
    rows = json.loads(report_path.read_text())["rows"]
    assert rows[-1]["fractions"]["16"] == 1.0


# ========================
# forward / weights / bench
# ========================
def test_forward_is_invariant_to_token_order(ppm, tmp_path):
    out = tmp_path / "tokens"
    assert cli.main(["tokenize", str(ppm), "--out", str(out)]) == 0
    tokens = load_tensor(out / "img.tokens.mtok")
    permuted = tmp_path / "permuted.mtok"
    save_tensor(tokens[np.random.default_rng(0).permutation(len(tokens))], permuted)

    assert cli.main(["forward", str(out / "img.tokens.mtok"), "--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(["forward", str(permuted), "--out", str(tmp_path / "b.json")]) == 0
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    assert a["num_tokens"] == 64 and len(a["logits"]) == 10
    np.testing.assert_allclose(b["logits"], a["logits"], rtol=1e-5, atol=1e-7)
    assert (tmp_path / "a.json.manifest.json").exists()


def test_saved_weights_match_seeded_defaults(ppm, tmp_path):
    assert cli.main(["init-weights", "--out", str(tmp_path / "w"), "--embedder-out", str(tmp_path / "e")]) == 0
    assert cli.main(["tokenize", str(ppm), "--out", str(tmp_path / "seeded")]) == 0
    assert cli.main(["tokenize", str(ppm), "--embedder", str(tmp_path / "e"), "--out", str(tmp_path / "loaded")]) == 0
    seeded = tmp_path / "seeded" / "img.tokens.mtok"
    assert seeded.read_bytes() == (tmp_path / "loaded" / "img.tokens.mtok").read_bytes()
    assert cli.main(["forward", str(seeded), "--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(["forward", str(seeded), "--weights", str(tmp_path / "w"), "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_bench_reports_components(ppm, tmp_path):
    report_path = tmp_path / "bench.json"
    assert cli.main(["bench", str(ppm), "--repetitions", "1", "--warmup", "0", "--no-pin", "--patches", "16",
                     "--format", "json", "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert [c["name"] for c in report["components"]] == ["scorer", "quadtree", "tokenizer", "transformer"]
    assert report["num_patches"] == 16


def test_bench_rejects_mixed_image_sizes(ppm, tmp_path):
    small = tmp_path / "small.ppm"
    save_ppm(random_image(128, 128, seed=5), small)
    assert cli.main(["bench", str(ppm), str(small), "--repetitions", "1", "--warmup", "0", "--no-pin",
                     "--patches", "16", "--out", str(tmp_path / "bench.txt")]) == 4
    assert not (tmp_path / "bench.txt").exists()
