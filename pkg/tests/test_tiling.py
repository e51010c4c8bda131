import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triflowsr.imagecore import Rect, crop, resize_bicubic
from triflowsr.matching import CorrespondenceField
from triflowsr.tiling import blend_stitch, blend_weights, extract_tiles, plan_tiles, tile_reference


def test_plan_examples():
    one = plan_tiles(1024, 1024, 1024, 256)
    assert len(one) == 1 and one.rects[0] == Rect(0, 0, 1024, 1024)
    big = plan_tiles(2048, 1536, 1024, 256)
    assert len(big) == 15
    assert sorted({r.x0 for r in big.rects}) == [0, 256, 512, 768, 1024]
    assert sorted({r.y0 for r in big.rects}) == [0, 256, 512]
    odd = plan_tiles(1025, 1024, 1024, 256)
    assert [r.x0 for r in odd.rects] == [0, 1]


def test_plan_row_major():
    plan = plan_tiles(100, 80, 40, 30)
    keys = [(r.y0, r.x0) for r in plan.rects]
    assert keys == sorted(keys)


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_tiles(100, 50, 64, 16)
    with pytest.raises(ValueError):
        plan_tiles(100, 100, 64, 0)
    with pytest.raises(ValueError):
        plan_tiles(100, 100, 64, 65)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.data())
def test_coverage_and_convexity(tile, step_seed, data):
    step = 1 + step_seed % tile
    w = data.draw(st.integers(tile, tile + 50))
    h = data.draw(st.integers(tile, tile + 50))
    plan = plan_tiles(w, h, tile, step)
    cover = np.zeros((h, w), int)
    for r in plan.rects:
        assert r.w == tile and r.h == tile
        cover[r.y0:r.y1, r.x0:r.x1] += 1
    assert cover.min() >= 1
    rng = np.random.default_rng(tile * 1000 + step)
    tiles = [rng.random((tile, tile, 1)) for _ in plan.rects]
    out = blend_stitch(plan, tiles)
    lo = np.full((h, w), np.inf)
    hi = np.full((h, w), -np.inf)
    for r, t in zip(plan.rects, tiles):
        lo[r.y0:r.y1, r.x0:r.x1] = np.minimum(lo[r.y0:r.y1, r.x0:r.x1], t[:, :, 0])
        hi[r.y0:r.y1, r.x0:r.x1] = np.maximum(hi[r.y0:r.y1, r.x0:r.x1], t[:, :, 0])
    assert np.all(out[:, :, 0] >= lo - 1e-12) and np.all(out[:, :, 0] <= hi + 1e-12)


def test_blend_weights_positive_in_range():
    plan = plan_tiles(200, 150, 64, 24)
    for r in plan.rects:
        w = blend_weights(plan, r)
        assert w.min() > 0 and w.max() <= 1


def test_constant_tiles():
    plan = plan_tiles(2048, 1536, 1024, 256)
    out = blend_stitch(plan, [np.full((1024, 1024, 3), 0.37)] * len(plan))
    assert np.abs(out - 0.37).max() <= 1e-6


def test_crop_restitch_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.random((300, 260, 3))
    plan = plan_tiles(260, 300, 96, 40)
    out = blend_stitch(plan, extract_tiles(img, plan))
    assert np.abs(out - img).max() <= 1 / 255


def test_two_tiles_band_center():
    plan = plan_tiles(12, 8, 8, 4)
    assert len(plan) == 2
    out = blend_stitch(plan, [np.full((8, 8, 1), 0.2), np.full((8, 8, 1), 0.6)])
    # overlap band is columns 4..7, its centre sits between columns 5 and 6
    centre = 0.5 * (out[:, 5, 0] + out[:, 6, 0])
    assert np.allclose(centre, 0.4, atol=1e-6)
    assert np.allclose(out[:, 5, 0] + out[:, 6, 0] - 0.8, 0, atol=1e-6)


def test_stitch_errors():
    plan = plan_tiles(16, 16, 8, 8)
    with pytest.raises(ValueError):
        blend_stitch(plan, [np.zeros((8, 8, 3))] * 3)
    with pytest.raises(ValueError):
        blend_stitch(plan, [np.zeros((8, 8, 3))] * 3 + [np.zeros((7, 8, 3))])


def test_tile_reference_aligned_identity():
    img = np.random.default_rng(1).random((40, 40, 3))
    rect = Rect(8, 4, 16, 16)
    ref = tile_reference(rect, "aligned", aligned_ref=img)
    assert np.array_equal(ref.image, crop(img, rect))


def test_tile_reference_relative_scale():
    raw = np.random.default_rng(2).random((64, 64, 3))
    plane = np.zeros((32, 32, 3))
    ref = tile_reference(Rect(0, 0, 16, 16), "relative", aligned_ref=plane, raw_ref=raw)
    assert np.allclose(ref.image, resize_bicubic(raw[:32, :32], 16, 16))


def _smooth(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([0.5 + 0.3 * np.sin(xs / 7.0), 0.5 + 0.3 * np.cos(ys / 9.0),
                     0.5 + 0.2 * np.sin((xs + ys) / 11.0)], -1)


def test_tile_reference_region_resize_translation():
    raw = _smooth(80, 80)
    field = CorrespondenceField.identity(48, 48)
    field.mapping[..., 0] += 10
    field.mapping[..., 1] += 5
    aligned = raw[5:53, 10:58]
    rect = Rect(8, 8, 24, 24)
    rr = tile_reference(rect, "region_resize", aligned_ref=aligned, raw_ref=raw, field=field)
    al = tile_reference(rect, "aligned", aligned_ref=aligned)
    assert rr.mode == "region_resize" and not rr.fallback
    assert np.abs(rr.image - al.image).max() <= 2 / 255


def test_tile_reference_region_fallback():
    raw = _smooth(40, 40)
    field = CorrespondenceField.identity(32, 32)
    field.mapping[...] = -50.0
    rr = tile_reference(Rect(0, 0, 16, 16), "region_resize", aligned_ref=np.zeros((32, 32, 3)),
                        raw_ref=raw, field=field)
    assert rr.fallback and rr.mode == "relative"
    with pytest.raises(ValueError):
        tile_reference(Rect(0, 0, 16, 16), "nope", aligned_ref=raw)
