"""Acceptance run: criteria 1-11 at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL`` line.  The desk pipeline
(datagen -> stage 0/1/2 -> tiled inference -> ablation) is built once per
session; expect roughly half an hour on one CPU core.
"""

import hashlib
import time

import numpy as np
import pytest

from triflowsr.cli import main as cli_main
from triflowsr.cli import run_ablation
from triflowsr.datagen import DESK_DEGRADATION, SceneSpec, build_dataset, generate_scene, homography_field
from triflowsr.degrade import DegradationConfig, degrade_pipeline
from triflowsr.flow import ModelConfig, euler_sample, patch_ref_attention
from triflowsr.imagecore import load_image, resize_bicubic
from triflowsr.matching import CorrespondenceField, MatchConfig, align_reference, coarse_match
from triflowsr.metrics import psnr, read_manifest, ssim
from triflowsr.tiling import blend_stitch, extract_tiles, plan_tiles
from triflowsr.train import MINI_CONFIG, TrainConfig, decile_ratio, grad_check, read_trace, run_stage

DESK_MODEL = ModelConfig(image_size=32, latent_scale=4.0)
DESK_MATCH = MatchConfig(working_size=64)
TRAIN_N, TRAIN_SEED = 64, 1
EVAL_N, EVAL_SEED = 16, 2
STEPS, BATCH, LEARNING_RATE = 3000, 8, 2e-3
STAGE_STEPS = {0: 6000, 1: STEPS, 2: STEPS}


@pytest.fixture
def say(capsys):
    def _say(n, ok, detail):
        label = f"criterion {n}" if isinstance(n, int) else n
        with capsys.disabled():
            print(f"\n{label}: {'PASS' if ok else 'FAIL'} ({detail})")
    return _say


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _train_cfg(stage, **kw):
    return TrainConfig(stage=stage, steps=STAGE_STEPS[stage], batch=BATCH, learning_rate=LEARNING_RATE, split="all",
                       seed=0, **kw)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train = build_dataset(TRAIN_N, TRAIN_SEED, root / "train", degradation=DESK_DEGRADATION)
    evalset = build_dataset(EVAL_N, EVAL_SEED, root / "eval", degradation=DESK_DEGRADATION)
    ckpt = root / "ckpt"
    results, times = {}, {}
    for stage in (0, 1, 2):
        if stage == 2:
            frozen_before = {n: _sha(ckpt / n) for n in ("sr.ckpt", "lr.ckpt")}
        t0 = time.perf_counter()
        results[stage] = run_stage(train, _train_cfg(stage), ckpt, DESK_MODEL, DESK_MATCH)
        times[stage] = time.perf_counter() - t0
    frozen_after = {n: _sha(ckpt / n) for n in ("sr.ckpt", "lr.ckpt")}
    return dict(root=root, train=train, eval=evalset, ckpt=ckpt, results=results, times=times,
                frozen_unchanged=frozen_before == frozen_after)


@pytest.fixture(scope="session")
def ablation(desk):
    t0 = time.perf_counter()
    table = run_ablation(desk["eval"], desk["ckpt"], desk["root"] / "ablation.csv", desk["root"] / "ablation",
                         split="all", kscales=(0.0, 0.5, 1.0), seed=0, match=DESK_MATCH)
    return {row["method"]: row for row in table}, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_criterion_01_attention(say):
    t0 = time.perf_counter()
    worst_row, hull_ok = 0.0, True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        heads = int(rng.integers(1, 4))
        d = heads * int(rng.integers(1, 5))
        n = int(rng.integers(1, 7))
        mats = [rng.standard_normal((n, d)) * rng.uniform(0.1, 4) for _ in range(7)]
        kscale = float(rng.uniform(0, 1))
        out, p = patch_ref_attention(mats[0], mats[1], mats[2], (mats[3], mats[4]), (mats[5], mats[6]),
                                     kscale=kscale, heads=heads, return_weights=True)
        worst_row = max(worst_row, float(np.abs(p.sum(-1) - 1).max()))
        hull_ok &= bool(np.all(p >= 0))
        dk = d // heads
        vh = np.concatenate([mats[2], mats[4], mats[6]]).reshape(3 * n, heads, dk).transpose(1, 0, 2)
        oh = out.reshape(n, heads, dk).transpose(1, 0, 2)
        hull_ok &= bool(np.allclose(oh, p @ vh, atol=1e-10))
        hull_ok &= bool(np.all(oh >= vh.min(1, keepdims=True) - 1e-9) and np.all(oh <= vh.max(1, keepdims=True) + 1e-9))
    one = np.ones((1, 1))
    hand = patch_ref_attention(one, 0 * one, one, (0 * one, 2 * one), (2 * one, 3 * one), kscale=1.0)[0, 0]
    elapsed = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and hull_ok and abs(hand - 2.6806) <= 1e-3 and elapsed < 5
    say(1, ok, f"row-sum err {worst_row:.1e}, hull {hull_ok}, example {hand:.4f}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_02_grad_check(say):
    assert (MINI_CONFIG.dim, MINI_CONFIG.layers, MINI_CONFIG.tokens) == (8, 2, 4)
    t0 = time.perf_counter()
    err = grad_check(MINI_CONFIG, seed=0, stage=2)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-3 and elapsed < 30
    say(2, ok, f"max relative error {err:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_sisr_degeneration(desk, say, tmp_path):
    r = read_manifest(desk["eval"])[0]
    lr, ref = desk["eval"].parent / r["lr_path"], desk["eval"].parent / r["ref_path"]
    t0 = time.perf_counter()
    same = []
    for seed in range(5):
        a, b = tmp_path / f"noref{seed}.png", tmp_path / f"ref0_{seed}.png"
        base = ["-q", "sr", "--ckpt", str(desk["ckpt"]), "--input", str(lr), "--seed", str(seed)]
        assert cli_main(base + ["--out", str(a), "--no-ref"]) == 0
        assert cli_main(base + ["--out", str(b), "--ref", str(ref), "--ref-layers", "0"]) == 0
        same.append(a.read_bytes() == b.read_bytes())
    elapsed = time.perf_counter() - t0
    ok = all(same) and elapsed < 60
    say(3, ok, f"byte-identical {sum(same)}/5 seeds, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_euler_exactness(say):
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((64, 48))
    eps = rng.standard_normal((64, 48))
    t0 = time.perf_counter()
    errs = {}
    for steps in (1, 5, 100):
        out = euler_sample(None, None, None, DESK_MODEL, noise=eps, velocity_fn=lambda z, t: eps - z0, steps=steps)
        errs[steps] = float(np.abs(out - z0).max())
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-6 and elapsed < 1
    say(4, ok, f"max error {max(errs.values()):.1e} over steps {sorted(errs)}, {elapsed:.3f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_matching(say):
    t0 = time.perf_counter()
    within, total, worst_pair = 0, 0, 1.0
    for seed in range(20):
        s = generate_scene(SceneSpec(seed=seed), DESK_DEGRADATION)
        lr_up = resize_bicubic(s.lr, 128, 128)
        _, full = align_reference(lr_up, s.ref_hr, cfg=DESK_MATCH)
        truth = homography_field(s.truth_homography, 128, 128)
        err = np.linalg.norm(full.mapping - truth, axis=-1)[8:-8, 8:-8]
        within += int((err <= 2).sum())
        total += err.size
        worst_pair = min(worst_pair, float((err <= 2).mean()))
    frac = within / total
    img = generate_scene(SceneSpec(seed=0)).hr
    f = coarse_match(img, img, DESK_MATCH)
    ident = CorrespondenceField.identity(f.width, f.height).mapping
    self_err = float(np.abs(f.mapping - ident).max())
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.9 and self_err <= 0.5 and elapsed < 120
    say(5, ok, f"{frac:.3f} of interior pixels within 2 px (worst pair {worst_pair:.3f}), "
               f"self-match error {self_err:.3f} px, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_06_tiling(say):
    t0 = time.perf_counter()
    plan = plan_tiles(2048, 1536, 1024, 256)
    rng = np.random.default_rng(0)
    img = rng.random((1536, 2048, 3), dtype=np.float32)
    roundtrip = float(np.abs(blend_stitch(plan, extract_tiles(img, plan)) - img).max())
    const = float(np.abs(blend_stitch(plan, [np.full((1024, 1024, 3), 0.37)] * len(plan)) - 0.37).max())
    elapsed = time.perf_counter() - t0
    ok = len(plan) == 15 and roundtrip <= 1 / 255 and const <= 1e-6 and elapsed < 10
    say(6, ok, f"{len(plan)} tiles, round trip {roundtrip:.1e}, constant {const:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_07_training_progress(desk, say):
    res = desk["results"][2]
    losses = [row[2] for row in res.trace]
    ratio = decile_ratio(losses)
    elapsed = desk["times"][2]
    ok = (len(losses) == STEPS and ratio < 0.5 and res.frozen_grad_max == 0.0 and desk["frozen_unchanged"]
          and elapsed < 900)
    say(7, ok, f"final/first decile {ratio:.3f}, frozen grad max {res.frozen_grad_max}, "
               f"frozen checkpoints unchanged {desk['frozen_unchanged']}, {elapsed:.0f}s "
               f"(stage 0 {desk['times'][0]:.0f}s, stage 1 {desk['times'][1]:.0f}s)")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_08_refsr_gain(ablation, say):
    rows, elapsed = ablation
    sisr, rb, full = rows["SISR"]["psnr"], rows["RB"]["psnr"], rows["RB+M+W"]["psnr"]
    ok = full >= sisr + 0.3 and full >= rb and elapsed < 600
    say(8, ok, f"RB+M+W {full:.3f} dB vs SISR {sisr:.3f} dB (gain {full - sisr:+.3f}), "
               f"RB-only {rb:.3f} dB, RB+M {rows['RB+M']['psnr']:.3f} dB, ablation {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_09_kscale_trend(ablation, say):
    rows, elapsed = ablation
    k0, k5, k1 = (rows[f"RB+M+W k={k}"]["psnr"] for k in ("0", "0.5", "1"))
    rng = np.random.default_rng(3)
    mats = [rng.standard_normal((6, 8)) for _ in range(7)]

    def f(k):
        return patch_ref_attention(mats[0], mats[1], mats[2], (mats[3], mats[4]), (mats[5], mats[6]),
                                   kscale=k, heads=2)
    ks = np.linspace(0, 1, 201)
    outs = np.stack([f(k) for k in ks])
    lip = np.abs(np.diff(outs, axis=0)).max() / (ks[1] - ks[0])
    continuous = all(np.abs(f(k + d) - f(k)).max() <= 1.5 * lip * d for k, d in ((0.0, 1e-4), (0.3, 1e-3), (0.9, 1e-2)))
    ok = k1 > k0 and continuous and elapsed < 600
    say(9, ok, f"kscale 0: {k0:.3f} dB, 0.5: {k5:.3f} dB, 1: {k1:.3f} dB; continuity (L={lip:.2f}) {continuous}")
    assert ok


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism(desk, say, tmp_path):
    t0 = time.perf_counter()
    checks = {}
    a = build_dataset(4, 9, tmp_path / "da", degradation=DESK_DEGRADATION).parent
    b = build_dataset(4, 9, tmp_path / "db", degradation=DESK_DEGRADATION).parent
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    checks["datagen"] = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    hr = generate_scene(SceneSpec(seed=4)).hr
    checks["degrade"] = np.array_equal(degrade_pipeline(hr, DegradationConfig(seed=4)),
                                       degrade_pipeline(hr, DegradationConfig(seed=4)))
    traces = []
    for run in ("ta", "tb"):
        cfg = TrainConfig(stage=0, steps=40, batch=BATCH, learning_rate=LEARNING_RATE, split="all", seed=3)
        run_stage(desk["train"], cfg, tmp_path / run, DESK_MODEL, DESK_MATCH)
        traces.append(read_trace(tmp_path / run / "loss_stage0.csv"))
    checks["train"] = traces[0] == traces[1]
    r = read_manifest(desk["eval"])[1]
    lr, ref = desk["eval"].parent / r["lr_path"], desk["eval"].parent / r["ref_path"]
    outs = []
    for i, threads in enumerate((1, 4, 1)):
        out = tmp_path / f"sr{i}.png"
        assert cli_main(["-q", "sr", "--ckpt", str(desk["ckpt"]), "--input", str(lr), "--ref", str(ref),
                         "--seed", "5", "--threads", str(threads), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    checks["sr"] = outs[0] == outs[1] == outs[2]
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 300
    say(10, ok, ", ".join(f"{k} {v}" for k, v in checks.items()) + f", {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 11

def test_criterion_11_metric_sanity(say):
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 0.9, (64, 64, 3))
    p16 = psnr(a, a + 16 / 255)
    s_const = ssim(np.full((32, 32, 1), 0.2), np.full((32, 32, 1), 0.8))
    s_self = ssim(a, a)
    ok = abs(p16 - 24.05) <= 0.01 and abs(s_const - 0.4721) <= 1e-3 and s_self == 1.0
    say(11, ok, f"PSNR offset-16 {p16:.4f} dB, SSIM constant pair {s_const:.6f} (target 0.4721), "
                f"ssim(a,a) {s_self}")
    assert ok


def test_trained_sisr_beats_bicubic_on_held_out(desk, ablation, say):
    """Held-out check from the model contract: trained weights give
    PSNR(out, HR) > PSNR(bicubic LR, HR)."""
    rows, _ = ablation
    root = desk["eval"].parent
    bic = np.mean([psnr(resize_bicubic(load_image(root / r["lr_path"]), 128, 128), load_image(root / r["hr_path"]))
                   for r in read_manifest(desk["eval"])])
    ok = rows["SISR"]["psnr"] > bic
    with_ref = rows["RB+M+W"]["psnr"]
    say("held-out SISR vs bicubic", ok, f"SISR {rows['SISR']['psnr']:.3f} dB, RefSR {with_ref:.3f} dB, bicubic {bic:.3f} dB")
    assert ok
