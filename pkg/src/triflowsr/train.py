"""Three training stages, the flow-matching loss, AdamW and gradient checks.

stage 0  SR branch alone on HR crops (stands in for the frozen prior)
stage 1  LR branch, SR frozen
stage 2  Ref branch, SR and LR frozen
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as kv
from .datagen import corner_homography, homography_field
from .flow import load_branch, save_branch
from .flow.model import (BranchWeights, ModelConfig, backward_branch, init_branch, patchify,
                         run_branch)
from .imagecore import bilinear_sample, load_image
from .matching import MatchConfig
from .metrics import EmptySplitError, read_manifest, select_split
from .pipeline import (Models, TileSettings, checkpoint_path, prepare_reference,
                       tiled_super_resolve, upscale_lr)
from .rng import child_seed, stream

log = logging.getLogger(__name__)

TRAINABLE = {0: "sr", 1: "lr", 2: "ref"}
HEAD_PARAMS = ("lnf_g", "lnf_b", "out_w", "out_b")
MIXED_SIZES = (32, 64)


class PrerequisiteError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 0
    steps: int = 3000
    batch: int = 8
    learning_rate: float = 5e-5
    warmup_steps: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    flip: bool = True
    crop: bool = True
    color_jitter: bool = True
    homography: bool = True
    homography_px: float = 1.0
    split: str = "train"
    mixed_resolution: bool = False
    mask: str = "sisr"
    branch_init: str = "copy"  # copy: start from the previous stage's branch
    context_prob: float = 0.5  # stage 0: share of steps that also read the crop's own clean K/V

    def __post_init__(self):
        if self.stage not in TRAINABLE:
            raise ValueError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.mask not in ("white", "sisr"):
            raise ValueError(f"mask must be white or sisr, got {self.mask!r}")
        if self.branch_init not in ("copy", "random"):
            raise ValueError(f"branch_init must be copy or random, got {self.branch_init!r}")
        if not 0.0 <= self.context_prob <= 1.0:
            raise ValueError("context_prob must lie in [0, 1]")


# ------------------------------------------------------------ optimizer

class AdamW:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * params[k]
            params[k] -= (lr * upd).astype(params[k].dtype)


def warmup_lr(base: float, step: int, warmup: int) -> float:
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


def clip_grads(grads: dict, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    scale = min(1.0, max_norm / (norm + 1e-6))
    if scale < 1.0:
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ----------------------------------------------------------------- loss

@dataclass
class ModelState:
    cfg: ModelConfig
    sr: BranchWeights
    lr: BranchWeights | None = None
    ref: BranchWeights | None = None

    def branch(self, role):
        return getattr(self, role)


def flow_loss(z_hr, z_lr, z_ref, state, t, eps, stage: int = 2, z_ctx=None):
    """Monte-Carlo flow-matching loss and gradients for one batch.

    Tokens are (B, N, D); ``t`` has one entry per sample.  Returns
    (loss, grads) with grads keyed by branch role; only the stage's
    trainable branch receives a gradient, the frozen ones get exact zeros.
    ``state`` may also be a plain callable v(z_t, t) (test stubs); then
    grads is empty.

    In stage 0, ``z_ctx`` switches on self-context: the SR weights run once
    more on these clean tokens at t = 0 and their K/V fill the slot the LR
    branch takes later, so the prior learns to read a context stream laid
    out the way copied branches will produce it.
    """
    z_hr = np.asarray(z_hr)
    eps = np.asarray(eps, dtype=z_hr.dtype)
    t = np.broadcast_to(np.asarray(t, dtype=z_hr.dtype), (z_hr.shape[0],))
    tb = t[:, None, None]
    z_t = (1 - tb) * z_hr + tb * eps
    target = eps - z_hr
    if callable(state) and not isinstance(state, ModelState):
        v = np.asarray(state(z_t, t))
        return float(np.mean((v - target) ** 2)), {}
    cfg = state.cfg
    train_role = TRAINABLE[stage]
    lr_cache = ref_cache = ctx_cache = None
    if stage == 0 and z_ctx is not None:
        _, ctx_cache, _ = run_branch(state.sr, cfg, z_ctx, 0.0, emit=True, keep=True)
        lr_cache = ctx_cache
    if stage >= 1:
        _, lr_cache, _ = run_branch(state.lr, cfg, z_lr, 0.0, emit=True, keep=(stage == 1))
    if stage == 2 and z_ref is not None and cfg.ref_depth > 0:
        _, ref_cache, _ = run_branch(state.ref, cfg, z_ref, 0.0, depth=cfg.ref_depth, emit=True, keep=True)
    v, _, tape = run_branch(state.sr, cfg, z_t, t, lr_cache=lr_cache, ref_cache=ref_cache,
                            head=True, keep=True)
    diff = v - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dv = (2.0 / diff.size) * diff
    sr_grads, d_lr_k, d_lr_v, d_ref_k, d_ref_v = backward_branch(
        state.sr, cfg, tape, dout=dv, param_grads=(stage == 0))
    grads = {}
    for role in ("sr", "lr", "ref"):
        w = state.branch(role)
        if w is not None:
            grads[role] = {k: np.zeros_like(a) for k, a in w.params.items()}
    if stage == 0:
        if ctx_cache is not None:
            ctx_grads = backward_branch(state.sr, cfg, ctx_cache.tape, dkeys=d_lr_k, dvalues=d_lr_v)[0]
            for k in sr_grads:
                sr_grads[k] += ctx_grads[k]
        grads["sr"] = sr_grads
    elif stage == 1:
        grads["lr"] = backward_branch(state.lr, cfg, lr_cache.tape, dkeys=d_lr_k, dvalues=d_lr_v)[0]
    elif ref_cache is not None:
        grads["ref"] = backward_branch(state.ref, cfg, ref_cache.tape, dkeys=d_ref_k, dvalues=d_ref_v)[0]
    return loss, grads


# ---------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = False
    crop: bool = False
    color_jitter: bool = False
    homography: bool = False
    crop_size: int = 64
    homography_px: float = 1.0


def augment(hr, ref, flags: AugmentFlags, rng: np.random.Generator, joint=()):
    """Random flip/crop (applied jointly to hr, ref and ``joint``), colour
    jitter and a small perspective warp (ref only).

    The same 18 uniforms are drawn whatever the flags, so a given rng state
    always means the same transform.
    """
    u = rng.random(18)
    arrs = [np.asarray(hr), np.asarray(ref)] + [np.asarray(a) for a in joint]
    if flags.flip:
        if u[0] < 0.5:
            arrs = [a[:, ::-1] for a in arrs]
        if u[1] < 0.5:
            arrs = [a[::-1] for a in arrs]
    if flags.crop:
        h, w = arrs[0].shape[:2]
        c = flags.crop_size
        if h < c or w < c:
            raise ValueError(f"image {w}x{h} smaller than crop {c}")
        y0 = int(u[2] * (h - c + 1))
        x0 = int(u[3] * (w - c + 1))
        arrs = [a[y0:y0 + c, x0:x0 + c] for a in arrs]
    ref_out = arrs[1]
    if flags.homography:
        offsets = (u[10:18].reshape(4, 2) * 2 - 1) * flags.homography_px
        h, w = ref_out.shape[:2]
        hm = corner_homography(w, h, offsets)
        grid = homography_field(hm, w, h)
        ref_out = bilinear_sample(ref_out, grid[..., 0], grid[..., 1])
    if flags.color_jitter:
        gain = 0.9 + 0.2 * u[4:7]
        offset = -0.05 + 0.1 * u[7:10]
        ref_out = np.clip(ref_out * gain + offset, 0.0, 1.0)
    arrs[1] = ref_out
    return tuple(np.ascontiguousarray(a) for a in arrs)


# ------------------------------------------------------------- training

@dataclass
class TrainResult:
    weights: BranchWeights
    trace: list = field(default_factory=list)
    frozen_grad_max: float = 0.0
    checkpoint: Path | None = None


@dataclass
class TrainingSet:
    hr: np.ndarray
    lr_up: np.ndarray
    ref: np.ndarray | None
    ids: list


def load_training_set(manifest, split: str, with_ref: bool, match_cfg: MatchConfig,
                      mask_models: Models | None = None, mask_tiles: TileSettings | None = None,
                      seed: int = 0, scale: int = 4) -> TrainingSet:
    manifest = Path(manifest)
    rows = select_split(read_manifest(manifest), split)
    if not rows:
        raise EmptySplitError(f"empty split {split!r} in {manifest}")
    hrs, lrs, refs = [], [], []
    for r in rows:
        hr = load_image(manifest.parent / r["hr_path"])
        lr_up = upscale_lr(load_image(manifest.parent / r["lr_path"]), scale)
        hrs.append(hr)
        lrs.append(lr_up)
        if with_ref:
            mask = None
            if mask_models is not None:
                mask, _ = tiled_super_resolve(lr_up, mask_models, mask_tiles, seed)
            aligned, _ = prepare_reference(lr_up, load_image(manifest.parent / r["ref_path"]), match_cfg, mask)
            refs.append(aligned)
    stack = lambda xs: np.stack(xs).astype(np.float32)  # noqa: E731
    return TrainingSet(stack(hrs), stack(lrs), stack(refs) if with_ref else None, [r["id"] for r in rows])


def _draw_batch(data: TrainingSet, cfg: TrainConfig, mcfg: ModelConfig, step: int):
    """Batch for one step, drawn only from (seed, stage, step) streams and
    processed in sorted sample order."""
    top = stream(child_seed(cfg.seed, cfg.stage), step)
    idx = np.sort(top.integers(0, len(data.hr), cfg.batch))
    size = mcfg.image_size
    if cfg.mixed_resolution:
        size = MIXED_SIZES[int(top.integers(0, len(MIXED_SIZES)))]
    flags = AugmentFlags(cfg.flip, cfg.crop, cfg.color_jitter and data.ref is not None,
                         cfg.homography and data.ref is not None, size, cfg.homography_px)
    hr_b, lr_b, ref_b, ts, eps_b = [], [], [], [], []
    for slot, i in enumerate(idx):
        g = stream(child_seed(cfg.seed, cfg.stage, step), slot)
        ref_in = data.ref[i] if data.ref is not None else data.hr[i]
        hr, ref, lr_up = augment(data.hr[i], ref_in, flags, g, joint=(data.lr_up[i],))
        if not cfg.crop and hr.shape[0] != size:
            raise ValueError(f"training images are {hr.shape[0]} px but image_size is {size}; enable crop")
        hr_b.append(hr)
        lr_b.append(lr_up)
        ref_b.append(ref)
        ts.append(g.random())
        eps_b.append(g.standard_normal((size // mcfg.patch) ** 2 * mcfg.latent_dim))
    step_cfg = replace(mcfg, image_size=size)
    dt = np.float32
    z_hr = patchify(np.stack(hr_b), step_cfg).astype(dt)
    z_lr = patchify(np.stack(lr_b), step_cfg).astype(dt)
    z_ref = patchify(np.stack(ref_b), step_cfg).astype(dt) if data.ref is not None else None
    eps = np.stack(eps_b).reshape(z_hr.shape).astype(dt)
    return step_cfg, z_hr, z_lr, z_ref, np.array(ts, dtype=dt), eps


def _require(ckpt_dir, roles, stage):
    for role in roles:
        if not checkpoint_path(ckpt_dir, role).is_file():
            first = {"sr": 0, "lr": 1}[role]
            raise PrerequisiteError(
                f"stage {stage} needs the {role} checkpoint {checkpoint_path(ckpt_dir, role)}; "
                f"run `train --stage {first}` first")


def init_branch_from(src: BranchWeights, role: str) -> BranchWeights:
    """New trainable branch starting as a copy of ``src`` (output head
    dropped), so its keys and values begin in the space the frozen SR
    queries already read."""
    params = {k: v.copy() for k, v in src.params.items() if k not in HEAD_PARAMS}
    return BranchWeights(role, params)


def run_stage(manifest, cfg: TrainConfig, ckpt_dir, model_cfg: ModelConfig | None = None,
              match_cfg: MatchConfig | None = None, data: TrainingSet | None = None,
              run_config: str = "") -> TrainResult:
    """Train one stage and write its checkpoint and loss CSV into ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    stage = cfg.stage
    role = TRAINABLE[stage]
    _require(ckpt_dir, {0: [], 1: ["sr"], 2: ["sr", "lr"]}[stage], stage)
    state = ModelState(model_cfg or ModelConfig(), None)
    if stage >= 1:
        state.sr, state.cfg, _ = load_branch(checkpoint_path(ckpt_dir, "sr"))
        state.sr.frozen = True
    if stage == 2:
        state.lr, _, _ = load_branch(checkpoint_path(ckpt_dir, "lr"))
        state.lr.frozen = True
    mcfg = state.cfg
    if stage > 0 and cfg.branch_init == "copy":
        fresh = init_branch_from(state.branch(TRAINABLE[stage - 1]), role)
    else:
        fresh = init_branch(mcfg, role, child_seed(cfg.seed, 77, stage), zero_head=True)
    setattr(state, role, fresh)
    if data is None:
        mask_models = None
        if stage == 2 and cfg.mask == "sisr":
            mask_models = Models(mcfg, state.sr, state.lr)
        tiles = TileSettings(mcfg.image_size, max(1, mcfg.image_size // 2))
        data = load_training_set(manifest, cfg.split, stage == 2, match_cfg or MatchConfig(),
                                 mask_models, tiles, cfg.seed)
    opt = AdamW(fresh.params)
    trace, frozen_max = [], 0.0
    for step in range(cfg.steps):
        step_cfg, z_hr, z_lr, z_ref, t, eps = _draw_batch(data, cfg, mcfg, step)
        state.cfg = step_cfg
        z_ctx = None
        if stage == 0 and stream(child_seed(cfg.seed, 90), step).random() < cfg.context_prob:
            z_ctx = z_hr
        loss, grads = flow_loss(z_hr, z_lr, z_ref, state, t, eps, stage, z_ctx)
        for other, g in grads.items():
            if other != role:
                frozen_max = max(frozen_max, max(float(np.abs(a).max()) for a in g.values()))
        clipped, norm = clip_grads(grads[role], cfg.grad_clip)
        lr_now = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps)
        opt.step(fresh.params, clipped, lr_now)
        trace.append((step, stage, loss, norm, lr_now))
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("stage %d step %d loss %.5f grad_norm %.4f lr %.2e", stage, step, loss, norm, lr_now)
    state.cfg = mcfg
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = checkpoint_path(ckpt_dir, role)
    extra = kv.dump_kv(cfg, "train.") + run_config
    save_branch(fresh, mcfg, path, extra)
    write_trace(trace, ckpt_dir / f"loss_stage{stage}.csv")
    return TrainResult(fresh, trace, frozen_max, path)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss", "grad_norm", "lr"])
        for step, stage, loss, norm, lr in trace:
            w.writerow([step, stage, repr(float(loss)), repr(float(norm)), repr(float(lr))])


def read_trace(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def decile_ratio(losses) -> float:
    """Mean of the last tenth of a loss trace over the mean of the first tenth."""
    losses = np.asarray(losses, dtype=np.float64)
    k = max(1, len(losses) // 10)
    return float(losses[-k:].mean() / losses[:k].mean())


# ------------------------------------------------------- gradient check

MINI_CONFIG = ModelConfig(image_size=4, patch=2, dim=8, heads=2, layers=2, sample_steps=2)


def grad_check(cfg: ModelConfig = MINI_CONFIG, seed: int = 0, stage: int = 2, batch: int = 2,
               h: float = 1e-3, zero_loss: bool = False, return_details: bool = False,
               context: bool = True):
    """Analytic vs central-difference gradients of flow_loss, in float64.

    Compares every parameter of the stage's trainable branch; the error of
    a tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||)
    (0 when both vanish).  Frozen branches must come back exactly zero and
    are left out of the comparison.  In stage 0 ``context`` also routes the
    self-context pass through the shared SR weights.  ``zero_loss`` sets z_hr = eps = 0 and
    a zero output head, so the loss and every gradient vanish.
    """
    g = stream(seed, 501)
    state = ModelState(cfg, None)
    for r in ("sr", "lr", "ref"):
        w = init_branch(cfg, r, child_seed(seed, 9, ROLE_IDS[r]), dtype=np.float64,
                        zero_head=zero_loss, random_norms=True)
        setattr(state, r, w)
    if zero_loss:
        state.sr.params["out_w"][:] = 0.0
        state.sr.params["out_b"][:] = 0.0
    shape = (batch, cfg.tokens, cfg.latent_dim)
    z_hr = g.standard_normal(shape)
    z_lr = g.standard_normal(shape)
    z_ref = g.standard_normal(shape)
    eps = g.standard_normal(shape)
    t = g.uniform(0.05, 0.95, batch)
    if zero_loss:
        z_hr = np.zeros(shape)
        eps = np.zeros(shape)
    role = TRAINABLE[stage]
    z_ctx = z_lr if stage == 0 and context else None
    loss, grads = flow_loss(z_hr, z_lr, z_ref, state, t, eps, stage, z_ctx)
    for other, gr in grads.items():
        if other != role and any(np.any(a != 0) for a in gr.values()):
            raise AssertionError(f"frozen branch {other} received a gradient")
    params = state.branch(role).params
    worst, details = 0.0, {}
    for name in sorted(params):
        p = params[name]
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = p[ix]
            p[ix] = old + h
            lp, _ = flow_loss(z_hr, z_lr, z_ref, state, t, eps, stage, z_ctx)
            p[ix] = old - h
            lm, _ = flow_loss(z_hr, z_lr, z_ref, state, t, eps, stage, z_ctx)
            p[ix] = old
            num[ix] = (lp - lm) / (2 * h)
        ana = grads[role][name]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        err = 0.0 if scale == 0 else float(np.linalg.norm(ana - num) / scale)
        details[name] = (err, float(np.abs(ana).max()), float(np.abs(num).max()))
        worst = max(worst, err)
    if return_details:
        return worst, details, loss
    return worst


ROLE_IDS = {"sr": 0, "lr": 1, "ref": 2}
