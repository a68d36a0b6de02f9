import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from sparsegs import io
from sparsegs.cli import main
from sparsegs.scenes import random_cloud, simple_camera


@pytest.fixture
def scene(tmp_path, rng):
    conf = rng.uniform(size=40)
    conf[:3] = [0.2, 0.0, 1.0]
    io.write_ply_points(tmp_path / "pts.ply", rng.normal(0, 1, (40, 3)) + [0, 0, 5],
                        rng.integers(0, 256, (40, 3)).astype(np.uint8), conf)
    io.write_cameras(tmp_path / "cams.json", [simple_camera(12, 11.0, center=[x, 0, 0]) for x in (-0.2, 0, 0.2)])
    io.write_gaussian_ply(tmp_path / "cloud.ply", random_cloud(rng, 6))
    return tmp_path, conf


def test_init_counts_and_threshold(scene, capsys):
    d, conf = scene
    assert main(["init", "--points", str(d / "pts.ply"), "--cameras", str(d / "cams.json"),
                 "--out", str(d / "init.ply")]) == 0
    expected = sum(1 for c in conf.astype(np.float32) if float(c) >= 0.2)
    assert capsys.readouterr().out.strip() == f"initialized {expected} gaussians from 40 points"
    assert len(io.read_gaussian_ply(d / "init.ply")) == expected


def test_init_rejects_bad_threshold(scene, capsys):
    d, _ = scene
    assert main(["init", "--points", str(d / "pts.ply"), "--conf-threshold", "1.1", "--out", str(d / "x.ply")]) == 1
    assert "error" in capsys.readouterr().err
    assert not (d / "x.ply").exists()


def test_mask_count(capsys):
    assert main(["mask", "--width", "28", "--height", "28", "--patch", "14"]) == 0
    assert capsys.readouterr().out.strip() == "208 masked pixels"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sparsegs", "mask", "--width", "5", "--height", "5"],
                         capture_output=True, text=True, check=True)
    assert res.stdout.strip() == "16 masked pixels"


def test_render_then_loss(scene, capsys):
    d, _ = scene
    args = ["render", "--cloud", str(d / "cloud.ply"), "--camera", f"{d / 'cams.json'}#1",
            "--out-color", str(d / "c.ppm"), "--out-depth", str(d / "d.pfm"), "--out-alpha", str(d / "a.pfm")]
    assert main(args) == 0
    assert io.read_ppm(d / "c.ppm").shape == (12, 12, 3)
    assert main(["loss", "pearson", "--pred", str(d / "d.pfm"), "--target", str(d / "d.pfm")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["loss"] == "pearson" and abs(out["value"]) < 1e-9
    assert main(["loss", "photometric", "--pred", str(d / "c.ppm"), "--target", str(d / "c.ppm")]) == 0
    assert json.loads(capsys.readouterr().out)["value"] == 0.0


def test_render_bad_camera_index(scene, capsys):
    d, _ = scene
    assert main(["render", "--cloud", str(d / "cloud.ply"), "--camera", f"{d / 'cams.json'}#7",
                 "--out-color", str(d / "c.ppm")]) == 1
    assert "ValueRange" in capsys.readouterr().err
    assert not (d / "c.ppm").exists()


def test_threads_must_be_positive(capsys):
    assert main(["mask", "--width", "4", "--height", "4", "--threads", "0"]) == 2


def test_missing_input_is_an_error(tmp_path, capsys):
    assert main(["render", "--cloud", str(tmp_path / "nope.ply"), "--camera", str(tmp_path / "c.json")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_pseudo_cams(scene, capsys):
    d, _ = scene
    assert main(["pseudo-cams", "--cameras", str(d / "cams.json"), "--out", str(d / "p.json")]) == 0
    assert len(io.read_cameras(d / "p.json")) == 12


def test_warp_identity(scene, rng):
    d, _ = scene
    img = rng.integers(0, 256, (12, 12, 3)).astype(np.uint8)
    io.write_ppm(d / "img.ppm", img)
    io.write_pfm(d / "depth.pfm", np.full((12, 12), 4.0))
    ref = f"{d / 'cams.json'}#0"
    assert main(["warp", "--image", str(d / "img.ppm"), "--depth", str(d / "depth.pfm"), "--src-camera", ref,
                 "--dst-camera", ref, "--out", str(d / "w.ppm"), "--out-mask", str(d / "m.pfm")]) == 0
    np.testing.assert_array_equal(io.read_ppm_bytes(d / "w.ppm"), img)
    assert np.all(io.read_pfm(d / "m.pfm") == 1.0)


def test_gradcheck_cli(scene, capsys):
    d, _ = scene
    assert main(["gradcheck", "--cloud", str(d / "cloud.ply"), "--camera", str(d / "cams.json"),
                 "--loss", "scale", "--strict", "--out", str(d / "gc.json")]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    assert "scale" in json.loads((d / "gc.json").read_text())["max_rel_error"]


def test_eval_fixture(tmp_path, capsys):
    a = np.zeros((4, 4, 3), np.uint8)
    b = a.copy()
    b[0, 0, 0] = 255
    io.write_ppm(tmp_path / "r.ppm", a)
    io.write_ppm(tmp_path / "g.ppm", b)
    io.write_ppm(tmp_path / "s.ppm", a)
    assert main(["eval", "--renders", str(tmp_path / "r.ppm"), str(tmp_path / "s.ppm"),
                 "--gts", str(tmp_path / "g.ppm"), str(tmp_path / "s.ppm"), "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    # one wrong byte out of 48: MSE = 1/48
    assert rep["views"][0]["psnr_db"] == pytest.approx(10 * math.log10(48), abs=1e-12)
    assert rep["views"][1]["psnr_db"] == math.inf
    assert rep["views"][0]["name"] == "r"
    assert "r" in capsys.readouterr().out


def test_eval_length_mismatch(tmp_path, capsys):
    io.write_ppm(tmp_path / "r.ppm", np.zeros((2, 2, 3), np.uint8))
    assert main(["eval", "--renders", str(tmp_path / "r.ppm"), str(tmp_path / "r.ppm"),
                 "--gts", str(tmp_path / "r.ppm"), "--out", str(tmp_path / "rep.json")]) == 1
    assert not os.path.exists(tmp_path / "rep.json")


def test_train_config_flags(scene, capsys):
    d, _ = scene
    io.write_ppm(d / "v.ppm", np.full((12, 12, 3), 0.5))
    (d / "views.json").write_text(json.dumps([{"camera": "cams.json#0", "image": "v.ppm"}]))
    (d / "cfg.json").write_text(json.dumps({"w_depth": 0.0, "iterations": 7}))
    assert main(["train", "--cloud", str(d / "cloud.ply"), "--views", str(d / "views.json"),
                 "--config", str(d / "cfg.json"), "--iterations", "3", "--w-scale", "0.5",
                 "--out", str(d / "t.ply"), "--history", str(d / "h.json")]) == 0
    meta = json.loads((d / "t.ply.json").read_text())
    assert meta["iteration"] == 3 and meta["config"]["w_scale"] == 0.5 and meta["config"]["w_depth"] == 0.0
    assert len(json.loads((d / "h.json").read_text())) == 3
    assert main(["train", "--cloud", str(d / "cloud.ply"), "--views", str(d / "views.json"),
                 "--multiview-trim-enabled", "true", "--out", str(d / "u.ply")]) == 1
    assert "UnsupportedOption" in capsys.readouterr().err
