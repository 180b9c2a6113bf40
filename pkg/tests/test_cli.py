import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from fdcam.backend import load_checkpoint, make_tiny_test_cnn, save_checkpoint
from fdcam.cam import SaliencyMap, fd_cam
from fdcam.cli import RunConfig, cmd_evaluate, main
from fdcam.data import load_dataset, load_image
from fdcam.grouping import all_groups, similarity_matrix
from fdcam.metrics import auc, deletion_curve, insertion_curve
from fdcam.render import contact_sheet, overlay, read_png_meta, read_saliency_png, save_saliency_png
from fdcam.shapes import ShapesDatasetSpec, write_shapes_dataset


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    return write_shapes_dataset(ShapesDatasetSpec(samples_per_class=4, seed=0),
                                tmp_path_factory.mktemp("ds"))


@pytest.fixture(scope="module")
def square(shapes):
    return shapes / "images" / "square_0000.png"


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


# -- rendering -------------------------------------------------------------------

def test_saliency_png_is_16_bit_and_lossless_to_quantization(tmp_path, rng):
    values = rng.random((9, 7))
    save_saliency_png(values, tmp_path / "m.png", {"k": 1})
    with Image.open(tmp_path / "m.png") as im:
        assert im.mode.startswith("I;16") or im.mode == "I"
    back = read_saliency_png(tmp_path / "m.png")
    assert np.max(np.abs(back - values)) <= 0.5 / 65535 + 1e-12
    assert read_png_meta(tmp_path / "m.png") == {"k": 1}


def test_overlay_and_contact_sheet(rng):
    img = rng.random((5, 6, 3))
    values = rng.random((5, 6))
    out = overlay(img, values)
    assert out.dtype == np.uint8 and out.shape == (5, 6, 3)
    sheet = contact_sheet([rng.random((4, 4)), np.zeros((4, 4))], scale=3)
    assert sheet.shape == (12, 24) and not sheet[:, 12:].any()


# -- explain ---------------------------------------------------------------------

def test_explain_methods_write_distinct_tagged_files(tmp_path, square, capsys):
    assert run("explain", square, "--out", tmp_path, "--method", "fd-cam") == 0
    assert run("explain", square, "--out", tmp_path, "--method", "grad-cam") == 0
    overlays = sorted(p.name for p in tmp_path.glob("*_overlay.png"))
    assert len(overlays) == 2
    assert any("fd-cam" in o for o in overlays) and any("grad-cam" in o for o in overlays)
    fd = read_json(next(tmp_path.glob("*fd-cam*.json")))
    gc = read_json(next(tmp_path.glob("*grad-cam*.json")))
    assert fd["method"].startswith("fd-cam(") and gc["method"] == "grad-cam"
    assert fd["saliency"]["sha256"] != gc["saliency"]["sha256"]


def test_explain_sidecar_contents(tmp_path, square):
    assert run("explain", square, "--out", tmp_path, "--score-mode", "logit", "--theta", "25") == 0
    (path,) = tmp_path.glob("*.json")
    doc = read_json(path)
    model = make_tiny_test_cnn(0)
    assert doc["model_hash"] == model.parameter_hash()
    assert doc["score_mode"] == "logit" and doc["config"]["score_mode"] == "logit"
    assert doc["config"]["theta"] == 25.0 and set(doc["config"]) == set(RunConfig().__dict__)
    assert doc["class_index"] == int(np.argmax(doc["class_scores"]))
    assert doc["saliency"]["interpolation"] == "bilinear-half-pixel"
    assert len(doc["weights"]["omega"]) == 16
    png = tmp_path / doc["saliency"]["png"]
    assert read_png_meta(png)["model_hash"] == doc["model_hash"]


def test_explain_saliency_png_matches_library(tmp_path, square):
    assert run("explain", square, "--out", tmp_path, "--class", 2) == 0
    (png,) = tmp_path.glob("*_saliency.png")
    img = load_image(square, (32, 32))
    expected = fd_cam(make_tiny_test_cnn(0), img, 2).values
    assert np.max(np.abs(read_saliency_png(png) - expected)) <= 0.5 / 65535 + 1e-12


def snapshot(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


def test_explain_rerun_is_byte_identical(tmp_path, square):
    assert run("explain", square, "--out", tmp_path) == 0
    first = snapshot(tmp_path)
    assert run("explain", square, "--out", tmp_path) == 0
    assert len(first) == 3 and snapshot(tmp_path) == first


def test_overlay_does_not_touch_saliency(tmp_path, square):
    assert run("explain", square, "--out", tmp_path) == 0
    (png,) = tmp_path.glob("*_saliency.png")
    before = png.read_bytes()
    (ov,) = tmp_path.glob("*_overlay.png")
    ov.unlink()
    assert run("explain", square, "--out", tmp_path) == 0
    assert png.read_bytes() == before


def test_explain_ablation_and_random(tmp_path, square):
    assert run("explain", square, "--out", tmp_path, "--method", "ablation-reduced") == 0
    assert run("explain", square, "--out", tmp_path, "--method", "random", "--seed", 4) == 0
    abl = read_json(next(tmp_path.glob("*ablation-reduced*.json")))
    assert "scheme=score_only" in abl["method"] and abl["weights"]["alpha"] is None


def test_missing_image_exit_code(tmp_path, capsys):
    assert run("explain", tmp_path / "nope.png", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_bad_class_and_config_values(tmp_path, square, capsys):
    assert run("explain", square, "--out", tmp_path, "--class", 3) == 2
    assert run("explain", square, "--out", tmp_path, "--theta", 0) == 2
    assert run("explain", square, "--out", tmp_path, "--step", 1.5) == 2
    assert run("explain", square, "--out", tmp_path, "--model", "tiny:abc") == 2
    assert run("explain", square, "--out", tmp_path, "--layer", "nope") == 2
    with pytest.raises(SystemExit) as exc:
        run("explain", square, "--method", "lime")
    assert exc.value.code == 2


def test_numeric_failure_exit_code(tmp_path, square, capsys):
    model = make_tiny_test_cnn(0)
    with torch.no_grad():
        model.net.head.weight[0, 0] = float("nan")
    save_checkpoint(model, tmp_path / "bad.pt")
    assert run("explain", square, "--out", tmp_path, "--model", tmp_path / "bad.pt") == 3
    assert "non-finite" in capsys.readouterr().err


def test_config_file_precedence(tmp_path, square):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("theta: 50\nbias: 0.25\nmethod: fd-cam\nscore-mode: logit\n")
    assert run("explain", square, "--config", cfg, "--out", tmp_path / "o", "--theta", 20) == 0
    doc = read_json(next((tmp_path / "o").glob("*.json")))
    assert doc["config"]["theta"] == 20.0  # flag beats file
    assert doc["config"]["bias"] == 0.25  # file beats default
    assert doc["config"]["score_mode"] == "logit"
    assert doc["config"]["scheme"] == "exp_bias"  # default
    (tmp_path / "j.json").write_text(json.dumps({"step": 0.05}))
    assert run("explain", square, "--config", tmp_path / "j.json", "--out", tmp_path / "p") == 0
    assert read_json(next((tmp_path / "p").glob("*.json")))["config"]["step"] == 0.05


def test_config_file_errors(tmp_path, square):
    (tmp_path / "a.yaml").write_text("colour: red\n")
    (tmp_path / "b.yaml").write_text("theta: lots\n")
    (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
    for name in ("a.yaml", "b.yaml", "c.yaml", "missing.yaml"):
        assert run("explain", square, "--config", tmp_path / name, "--out", tmp_path / "o") == 2


# -- groups ----------------------------------------------------------------------

def test_groups_json_matches_module(tmp_path, square):
    assert run("groups", square, "--channels", 0, 5, "--theta", 25, "--out", tmp_path) == 0
    doc = read_json(next(tmp_path.glob("*_groups.json")))
    model = make_tiny_test_cnn(0)
    acts = model.capture_activations(load_image(square, (32, 32)))
    expected = all_groups(similarity_matrix(acts), 25)
    assert doc["K"] == 16 and doc["theta"] == 25.0
    assert doc["groups"] == [list(g) for g in expected]
    assert sorted(doc["channels"]["5"]["members"]) == list(expected[5])
    assert doc["channels"]["5"]["members"][0] == 5
    sims = doc["channels"]["5"]["similarities"]
    assert sims[0] == 1.0 and sims[1:] == sorted(sims[1:], reverse=True)


def test_groups_theta_100_sheet_has_all_channels(tmp_path, square):
    assert run("groups", square, "--channels", 3, "--theta", 100, "--out", tmp_path) == 0
    with Image.open(next(tmp_path.glob("*_group_ch3.png"))) as im:
        assert im.size == (16 * 8 * 4, 8 * 4)


def test_groups_zero_channel_is_singleton(tmp_path):
    black = tmp_path / "black.png"
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(black)
    assert run("groups", black, "--channels", 0, 7, "--theta", 100, "--out", tmp_path) == 0
    doc = read_json(tmp_path / "black_groups.json")
    assert doc["channels"]["7"]["members"] == [7]
    with Image.open(tmp_path / "black_group_ch7.png") as im:
        assert im.size == (8 * 4, 8 * 4)


def test_groups_channel_out_of_range(tmp_path, square):
    assert run("groups", square, "--channels", 16, "--out", tmp_path) == 2


# -- evaluate --------------------------------------------------------------------

def test_evaluate_empty_dataset(tmp_path):
    ds = tmp_path / "empty"
    (ds / "annotations").mkdir(parents=True)
    (ds / "manifest.json").write_text(json.dumps({"classes": ["a"]}))
    out = tmp_path / "out"
    assert run("evaluate", ds, "--metric", "faithfulness", "--out", out) == 2
    assert not out.exists() or not any(out.iterdir())


def test_evaluate_single_image_matches_metrics(tmp_path, shapes):
    assert run("evaluate", shapes, "--metric", "faithfulness", "--limit", 1, "--out", tmp_path) == 0
    doc = read_json(tmp_path / "faithfulness_fd-cam.json")
    sample = load_dataset(shapes, (32, 32), limit=1).samples[0]
    model = make_tiny_test_cnn(0)
    c = int(np.argmax(model.forward_scores(sample.image)))
    smap = fd_cam(model, sample.image, c)
    assert doc["images"][0]["deletion_auc"] == auc(deletion_curve(model, sample.image, smap, c))
    assert doc["images"][0]["insertion_auc"] == auc(insertion_curve(model, sample.image, smap, c))
    plot = tmp_path / "curves_fd-cam" / f"{sample.name}.png"
    assert read_png_meta(plot)["model_hash"] == model.parameter_hash()
    with open(tmp_path / "faithfulness_fd-cam.csv") as fh:
        first = fh.readline()
        rows = list(csv.DictReader(fh))
    assert first.startswith("# run: ") and json.loads(first[7:])["model_hash"] == model.parameter_hash()
    assert [r["name"] for r in rows] == [sample.name, "MEAN"]


def test_evaluate_rerun_is_byte_identical(tmp_path, shapes):
    snapshots = []
    for _ in range(2):
        assert run("evaluate", shapes, "--metric", "faithfulness", "--limit", 2, "--method", "grad-cam",
                   "--no-plots", "--out", tmp_path) == 0
        assert run("evaluate", shapes, "--metric", "pointing", "--split", "val", "--out", tmp_path) == 0
        snapshots.append(snapshot(tmp_path))
    assert sorted(snapshots[0]) == ["faithfulness_grad-cam.csv", "faithfulness_grad-cam.json",
                                    "pointing_fd-cam.csv", "pointing_fd-cam.json"]
    assert snapshots[0] == snapshots[1]


def test_pointing_with_oracle_saliency_is_perfect(tmp_path, shapes):
    def oracle(model, image, class_index):
        # any pixel that is not background lies inside the shape's box
        return SaliencyMap(image.any(axis=2).astype(float), class_index, "oracle")

    doc = cmd_evaluate(RunConfig(out=str(tmp_path)), shapes, "pointing", method=oracle)
    assert doc["accuracy"] == 1.0 and doc["hits"] == 12


# -- make-shapes / train-tiny ----------------------------------------------------

def test_make_shapes_command(tmp_path):
    assert run("make-shapes", "--out", tmp_path / "a", "--samples-per-class", 3, "--seed", 2) == 0
    assert run("make-shapes", "--out", tmp_path / "b", "--samples-per-class", 3, "--seed", 2) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9 + 9 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_tiny_gate_failure_exit_code(tmp_path, capsys):
    out = tmp_path / "t"
    assert run("train-tiny", "--out", out, "--samples-per-class", 6, "--epochs", 1) == 3
    assert "below gate" in capsys.readouterr().err
    metrics = read_json(out / "train_metrics.json")
    assert metrics["passed"] is False and (out / "tiny.pt").is_file()


def test_train_tiny_reproduces_recorded_run(tmp_path, trained):
    assert run("train-tiny", "--out", tmp_path, "--data", trained.data) == 0
    metrics = read_json(tmp_path / "train_metrics.json")
    assert metrics["val_accuracy"] == trained.metrics["val_accuracy"] == 1.0
    assert metrics["parameter_hash"] == trained.metrics["parameter_hash"]
    loaded = load_checkpoint(tmp_path / "tiny.pt")
    probe = np.random.default_rng(1).random((32, 32, 3))
    assert np.array_equal(loaded.forward_scores(probe), trained.model.forward_scores(probe))
