import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triflowsr.datagen import DESK_DEGRADATION, SceneSpec, generate_scene, homography_field
from triflowsr.imagecore import resize_bicubic, warp_bilinear
from triflowsr.matching import (CorrespondenceField, MatchConfig, align_reference, coarse_match,
                                compose_reference, load_field, save_certainty_heatmap, save_field,
                                upscale_field)
from triflowsr.metrics import psnr


def _scene(seed, canvas=128, **kw):
    return generate_scene(SceneSpec(seed=seed, canvas=canvas, **kw), DESK_DEGRADATION)


def test_self_match_identity():
    img = _scene(0).hr
    cfg = MatchConfig(working_size=64)
    f = coarse_match(img, img, cfg)
    ident = CorrespondenceField.identity(64, 64).mapping
    assert np.abs(f.mapping - ident).max() <= 0.5
    assert f.certainty.mean() >= 0.99


def test_translation_fixture():
    canvas = 64
    big = _scene(3, canvas=128).hr
    lr_up = big[20:20 + canvas, 20:20 + canvas]
    ref = big[20:20 + canvas, 8:8 + canvas]  # content shifted right by 12
    cfg = MatchConfig(working_size=canvas, search_radius=16)
    f = coarse_match(lr_up, ref, cfg)
    m = cfg.radius
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    want = np.stack([xs + 12, ys], -1)
    inner = (slice(m, canvas - m), slice(m, canvas - m - 12))
    assert np.abs(f.mapping[inner] - want[inner]).max() <= 1.0


def test_unrelated_noise_low_certainty():
    rng = np.random.default_rng(5)
    a, b = rng.random((128, 128, 3)), rng.random((128, 128, 3))
    f = coarse_match(a, b, MatchConfig(working_size=64))
    assert f.certainty.mean() <= 0.1
    aligned, full = align_reference(a, b, cfg=MatchConfig(working_size=64))
    assert np.abs(aligned - 1.0).mean() < np.abs(resize_bicubic(b, 128, 128) - 1.0).mean()


def test_deterministic():
    s = _scene(4)
    lr_up = resize_bicubic(s.lr, 128, 128)
    a = coarse_match(lr_up, s.ref_hr, MatchConfig(working_size=48))
    b = coarse_match(lr_up, s.ref_hr, MatchConfig(working_size=48))
    assert np.array_equal(a.mapping, b.mapping) and np.array_equal(a.certainty, b.certainty)


def test_upscale_same_size_and_constant():
    f = CorrespondenceField(np.random.default_rng(0).random((10, 12, 2)) * 10, np.full((10, 12), 0.7),
                            12, 10, 24, 20)
    up = upscale_field(f, 12, 10)
    assert np.allclose(up.mapping[..., 0], (f.mapping[..., 0] + 0.5) * 2 - 0.5, atol=1e-6)
    assert np.allclose(up.mapping[..., 1], (f.mapping[..., 1] + 0.5) * 2 - 0.5, atol=1e-6)
    big = upscale_field(f, 37, 29)
    assert np.allclose(big.certainty, 0.7, atol=1e-12)
    with pytest.raises(ValueError):
        upscale_field(f, 0, 5)


@pytest.mark.parametrize("ws,full", [(56, 224), (560, 2240)])
def test_upscale_identity_rescale(ws, full):
    f = CorrespondenceField.identity(ws, ws)
    f = CorrespondenceField(f.mapping, f.certainty, ws, ws, full, full)
    up = upscale_field(f, full, full)
    assert np.abs(up.mapping - CorrespondenceField.identity(full, full).mapping).max() <= 0.5


def test_compose_cases():
    ref = np.random.default_rng(1).random((16, 16, 3))
    mask = np.random.default_rng(2).random((16, 16, 3))
    ident = CorrespondenceField.identity(16, 16)
    assert np.array_equal(compose_reference(ref, ident, mask), warp_bilinear(ref, ident))
    zero = CorrespondenceField.identity(16, 16, certainty=0.0)
    assert np.array_equal(compose_reference(ref, zero, mask), mask)
    half = CorrespondenceField.identity(16, 16, certainty=0.5)
    assert np.allclose(compose_reference(np.zeros((16, 16, 3)), half, np.ones((16, 16, 3))), 0.5)
    with pytest.raises(ValueError):
        compose_reference(ref, ident, np.zeros((8, 8, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_compose_convex(seed):
    rng = np.random.default_rng(seed)
    ref, mask = rng.random((9, 7, 3)), rng.random((9, 7, 3))
    f = CorrespondenceField(rng.uniform(-2, 10, (9, 7, 2)), rng.random((9, 7)), 7, 9, 7, 9)
    out = compose_reference(ref, f, mask)
    warped = warp_bilinear(ref, f)
    assert np.all(out >= np.minimum(warped, mask) - 1e-12)
    assert np.all(out <= np.maximum(warped, mask) + 1e-12)


def test_field_validation():
    with pytest.raises(ValueError):
        CorrespondenceField(np.zeros((4, 4, 2)), np.full((4, 4), 1.5), 4, 4, 4, 4)
    with pytest.raises(ValueError):
        CorrespondenceField(np.full((4, 4, 2), np.nan), np.zeros((4, 4)), 4, 4, 4, 4)
    with pytest.raises(ValueError):
        MatchConfig(patch=8)
    with pytest.raises(ValueError):
        MatchConfig(working_size=5)
    with pytest.raises(ValueError):
        MatchConfig(search_radius=0)


def test_self_reference_does_not_hurt():
    # ref is the clean HR behind lr; the upscaled LR doubles as the mask
    for seed in (6, 7):
        s = _scene(seed)
        lr_up = resize_bicubic(s.lr, 128, 128)
        aligned, _ = align_reference(lr_up, s.hr, mask=lr_up, cfg=MatchConfig(working_size=64))
        assert psnr(aligned, s.hr) >= psnr(lr_up, s.hr)


def test_homography_pair_accuracy():
    s = _scene(7)
    lr_up = resize_bicubic(s.lr, 128, 128)
    _, full = align_reference(lr_up, s.ref_hr, cfg=MatchConfig(working_size=64))
    truth = homography_field(s.truth_homography, 128, 128)
    err = np.linalg.norm(full.mapping - truth, axis=-1)[8:-8, 8:-8]
    assert (err <= 2).mean() >= 0.9


def test_field_serialization(tmp_path):
    f = CorrespondenceField(np.random.default_rng(0).random((5, 6, 2)) * 7, np.linspace(0, 1, 30).reshape(5, 6),
                            6, 5, 12, 10)
    save_field(f, tmp_path / "f.tfcf")
    g = load_field(tmp_path / "f.tfcf")
    assert np.allclose(g.mapping, f.mapping, atol=1e-5) and np.allclose(g.certainty, f.certainty, atol=1e-6)
    assert (g.src_ref_w, g.src_ref_h) == (12, 10)
    raw = (tmp_path / "f.tfcf").read_bytes()
    (tmp_path / "bad").write_bytes(raw[:40])
    with pytest.raises(ValueError):
        load_field(tmp_path / "bad")
    save_certainty_heatmap(f, tmp_path / "c.png")
    assert (tmp_path / "c.png").stat().st_size > 0
