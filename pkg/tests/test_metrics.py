import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegs.errors import DimensionMismatch, LengthMismatch
from sparsegs.losses import photometric_loss
from sparsegs.metrics import eval_report, psnr, report_json, report_table, ssim
from test_losses import ssim_oracle


def test_psnr_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.full((4, 4, 3), 0.5), np.full((4, 4, 3), 0.4)) == pytest.approx(20.0, abs=1e-12)
    b = rng.uniform(size=(8, 8, 3))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)
    with pytest.raises(DimensionMismatch):
        psnr(a, b[:, :-1])


def test_ssim_examples(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    noise = rng.uniform(size=(16, 16, 3))
    const = np.full((16, 16, 3), 0.3)
    assert ssim(noise, const) == pytest.approx(ssim_oracle(noise, const), abs=1e-9)
    b = rng.uniform(size=(16, 16, 3))
    assert abs(ssim(a, b) - (1 - 2 * photometric_loss(a, b, 1.0))) < 1e-12
    with pytest.raises(DimensionMismatch):
        ssim(a, b[1:])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(9, 7, 3))
    b = rng.uniform(size=(9, 7, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0


def test_report_single_identical_pair():
    a = np.full((6, 6, 3), 0.25)
    traj = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    rep = eval_report([a], [a], traj, traj, names=["only"])
    assert rep["views"][0]["psnr_db"] == math.inf
    assert rep["views"][0]["ssim"] == pytest.approx(1.0)
    assert rep["views"][0]["lpips"] is None
    assert rep["ate_mean"] == pytest.approx(0.0, abs=1e-12)
    text = report_json(rep)
    assert "Infinity" in text and json.loads(text)["views"][0]["name"] == "only"
    assert "only" in report_table(rep)


def test_report_permutation_and_fixture(rng):
    renders = [rng.uniform(size=(10, 10, 3)) for _ in range(3)]
    gts = [np.clip(r + rng.normal(0, 0.05, r.shape), 0, 1) for r in renders]
    rep = eval_report(renders, gts, names=["a", "b", "c"])
    perm = eval_report(renders[::-1], gts[::-1], names=["c", "b", "a"])
    assert rep["mean_psnr_db"] == pytest.approx(perm["mean_psnr_db"], abs=1e-12)
    assert rep["mean_ssim"] == pytest.approx(perm["mean_ssim"], abs=1e-12)
    hand = {
        "views": [{"name": n, "psnr_db": psnr(r, g), "ssim": ssim(r, g), "lpips": None}
                  for n, r, g in zip("abc", renders, gts)],
        "ate_mean": None,
        "ate_rmse": None,
    }
    hand["mean_psnr_db"] = sum(v["psnr_db"] for v in hand["views"]) / 3
    hand["mean_ssim"] = sum(v["ssim"] for v in hand["views"]) / 3
    assert rep.keys() == hand.keys()
    assert rep["views"] == hand["views"]
    assert rep["mean_psnr_db"] == pytest.approx(hand["mean_psnr_db"], abs=1e-12)
    with pytest.raises(LengthMismatch):
        eval_report(renders, gts[:2])
