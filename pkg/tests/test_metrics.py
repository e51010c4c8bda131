import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from triflowsr.datagen import build_dataset
from triflowsr.degrade import DegradationConfig
from triflowsr.imagecore import load_image, resize_bicubic, save_image
from triflowsr.metrics import (EmptySplitError, MissingOutputsError, PSNR_CAP, eval_run, psnr,
                               read_manifest, ssim)

images = arrays(np.float64, st.tuples(st.integers(11, 16), st.integers(11, 16), st.sampled_from([1, 3])),
                elements=st.floats(0, 1))


def test_psnr_cases():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4, 1)), np.ones((4, 4, 1))) == 0.0
    base = np.random.default_rng(0).uniform(0, 0.5, (16, 16, 3))
    want = 10 * math.log10(255 ** 2 / 256)
    assert abs(psnr(base, base + 16 / 255) - want) < 1e-9
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_constant_pair_closed_form():
    c1 = 0.01 ** 2
    want = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
    got = ssim(np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8))
    assert abs(got - want) < 1e-9
    assert abs(got - 0.470666) < 1e-6


def _ssim_reference(x, y):
    """Per-window loop over every valid 11x11 position."""
    r = np.arange(11) - 5.0
    g = np.exp(-r ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(7)
    x = rng.random((15, 13))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert abs(ssim(x, y) - _ssim_reference(x, y)) < 1e-9


def test_ssim_uses_bt601_luma():
    rng = np.random.default_rng(8)
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    luma = np.array([0.299, 0.587, 0.114])
    assert abs(ssim(a, b) - _ssim_reference(a @ luma, b @ luma)) < 1e-9


def test_ssim_uncorrelated_noise():
    rng = np.random.default_rng(3)
    assert ssim(rng.random((64, 64, 1)), rng.random((64, 64, 1))) < 0.1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 1)), np.zeros((10, 20, 1)))


@settings(max_examples=30, deadline=None)
@given(images, st.data())
def test_metric_symmetry_and_flip(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(0, 1)))
    assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(a[:, ::-1], b[:, ::-1]), abs=1e-9)
    assert psnr(a, b) == pytest.approx(psnr(a[:, ::-1], b[:, ::-1]), abs=1e-9)
    assert ssim(a, a) == 1.0


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 0.8, (32, 32, 3))
    noise = rng.normal(size=img.shape)
    vals = [psnr(img, img + s * noise) for s in (0.01, 0.03, 0.1)]
    assert vals[0] > vals[1] > vals[2]


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_dataset(12, 4, root, degradation=DegradationConfig(second_order=False))
    return root


def test_eval_identity_outputs(small_set, tmp_path):
    rows = read_manifest(small_set / "manifest.csv")
    for r in rows:
        save_image(load_image(small_set / r["hr_path"]), tmp_path / f"{r['id']}.png")
    rep = eval_run(small_set / "manifest.csv", tmp_path, "copy", split="all", out_csv=tmp_path / "r.csv")
    assert len(rep.rows) == len(rows)
    assert rep.mean_psnr == PSNR_CAP and rep.mean_ssim == 1.0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,method,psnr,ssim"
    assert lines[-1].startswith("MEAN,")
    assert (tmp_path / "r.csv.json").is_file()


def test_eval_bicubic_baseline_is_finite_mean_of_rows(small_set, tmp_path):
    rows = read_manifest(small_set / "manifest.csv")
    for r in rows:
        lr = load_image(small_set / r["lr_path"])
        save_image(resize_bicubic(lr, lr.shape[1] * 4, lr.shape[0] * 4), tmp_path / f"{r['id']}.png")
    rep = eval_run(small_set / "manifest.csv", tmp_path, "bicubic", split="all")
    assert 10 < rep.mean_psnr < 40
    assert rep.mean_psnr == pytest.approx(np.mean([x[2] for x in rep.rows]))
    again = eval_run(small_set / "manifest.csv", tmp_path, "bicubic", split="all")
    assert again.rows == rep.rows


def test_eval_errors(small_set, tmp_path):
    with pytest.raises(MissingOutputsError) as err:
        eval_run(small_set / "manifest.csv", tmp_path, "x", split="all")
    assert len(err.value.ids) == 12
    with pytest.raises(EmptySplitError):
        eval_run(small_set / "manifest.csv", tmp_path, "x", split="nosuch")
