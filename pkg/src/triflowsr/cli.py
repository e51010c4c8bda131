"""Command-line entry point.

    triflowsr [--config FILE] [-q] <command> ...

Commands: datagen, train, sr, match, eval, ablate.  Settings resolve as
command-line flag > config file (``section.key=value``) > built-in
default.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as kv
from .datagen import DESK_DEGRADATION, SceneSpec, build_dataset
from .degrade import DegradationConfig
from .flow.model import ModelConfig
from .imagecore import ImageError, load_image, save_image
from .matching import MatchConfig, align_reference, save_certainty_heatmap, save_field, white_mask
from .metrics import eval_run, read_manifest, select_split
from .pipeline import (MissingCheckpointError, TileSettings, checkpoint_path, load_models, run_sr,
                       upscale_lr)
from .train import PrerequisiteError, TrainConfig, run_stage

log = logging.getLogger("triflowsr")


@dataclass(frozen=True)
class SrOptions:
    tile: int | None = None        # None -> the model's training crop size
    tile_step: int | None = None   # None -> tile // 2
    seed: int = 0
    mask: str | None = None        # None -> sisr when an LR branch exists, else white
    kscale: float | None = None
    ref_layers: int | None = None
    scale: int = 4
    threads: int = 1


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "degrade": DegradationConfig,
            "match": MatchConfig, "scene": SceneSpec, "sr": SrOptions}


class UsageError(Exception):
    pass


def load_config_file(path) -> dict:
    if path is None:
        return {}
    values = kv.read_kv(Path(path).read_text(encoding="utf-8"))
    for key in values:
        if key.split(".", 1)[0] not in SECTIONS or "." not in key:
            raise UsageError(f"unknown config key {key!r} in {path}")
    return values


def resolve(section: str, file_values: dict, overrides: dict, base=None):
    """Defaults < config file < explicit command-line overrides."""
    cls = SECTIONS[section]
    obj = kv.from_kv(cls, file_values, section + ".", base=base if base is not None else cls())
    given = {k: v for k, v in overrides.items() if v is not None}
    return replace(obj, **given) if given else obj


def run_config_text(**sections) -> str:
    return "".join(kv.dump_kv(obj, name + ".") for name, obj in sections.items())


def _write_sidecar(path, text: str) -> None:
    Path(str(path) + ".cfg").write_text(text, encoding="utf-8")


# ------------------------------------------------------------- commands

def cmd_datagen(args, file_values) -> int:
    base = DESK_DEGRADATION if args.degradation == "desk" else DegradationConfig()
    degradation = resolve("degrade", file_values, {}, base)
    scene = resolve("scene", file_values, {"canvas": args.canvas})
    manifest = build_dataset(args.n, args.seed, args.out, scene, degradation)
    log.info("wrote %d samples to %s", args.n, manifest)
    return 0


def cmd_train(args, file_values) -> int:
    tcfg = resolve("train", file_values, {
        "stage": args.stage, "steps": args.steps, "batch": args.batch, "learning_rate": args.lr,
        "seed": args.seed, "split": args.split, "warmup_steps": args.warmup, "grad_clip": args.grad_clip,
        "branch_init": args.branch_init, "context_prob": args.context_prob})
    mcfg = resolve("model", file_values, {
        "image_size": args.image_size, "dim": args.dim, "layers": args.layers, "heads": args.heads,
        "patch": args.patch, "latent_scale": args.latent_scale})
    match = resolve("match", file_values, {"working_size": args.working_size})
    text = run_config_text(model=mcfg, train=tcfg, match=match)
    result = run_stage(args.data, tcfg, args.ckpt, mcfg, match, run_config=text)
    _write_sidecar(Path(args.ckpt) / f"loss_stage{tcfg.stage}.csv", text)
    log.info("stage %d done: final loss %.5f, checkpoint %s", tcfg.stage, result.trace[-1][2],
             result.checkpoint)
    return 0


def _sr_settings(args, file_values, models, plane_w, plane_h):
    opts = resolve("sr", file_values, {
        "tile": args.tile, "tile_step": args.tile_step, "seed": args.seed, "mask": args.mask,
        "kscale": args.kscale, "ref_layers": args.ref_layers, "threads": args.threads})
    tile = opts.tile or models.cfg.image_size
    step = opts.tile_step or max(1, tile // 2)
    mask = opts.mask or ("sisr" if models.lr is not None else "white")
    opts = replace(opts, tile=tile, tile_step=step, mask=mask)
    match = resolve("match", file_values, {"working_size": args.working_size})
    if args.working_size is None and "match.working_size" not in file_values:
        match = replace(match, working_size=default_working_size(plane_w, plane_h))
    return opts, match


def default_working_size(w: int, h: int, full: int = 560) -> int:
    """560 at full scale; capped at half the short side for small inputs."""
    return max(9, min(full, min(w, h) // 2))


def _mode(args) -> str:
    if args.no_match:
        return "relative"
    if args.no_warp:
        return "region_resize"
    return "aligned"


def cmd_sr(args, file_values) -> int:
    if args.ref is None and not args.no_ref:
        raise UsageError("sr needs --ref <path> or --no-ref")
    if args.ref is not None and args.no_ref:
        raise UsageError("--ref and --no-ref are mutually exclusive")
    models = load_models(args.ckpt, need=("sr", "lr"), optional=() if args.no_ref else ("ref",))
    if args.ref is not None and models.ref is None:
        raise MissingCheckpointError(f"--ref given but no ref checkpoint in {args.ckpt}; run `train --stage 2`")
    lr = load_image(args.input)
    ref = load_image(args.ref) if args.ref else None
    scale = resolve("sr", file_values, {}).scale
    opts, match = _sr_settings(args, file_values, models, lr.shape[1] * scale, lr.shape[0] * scale)
    mode = _mode(args)
    out, info = run_sr(lr, ref, models, TileSettings(opts.tile, opts.tile_step, opts.threads), match,
                       seed=opts.seed, mode=mode, mask=opts.mask, kscale=opts.kscale,
                       ref_layers=opts.ref_layers, scale=opts.scale)
    log.info("tiles: %d", info["tiles"])
    save_image(out, args.out)
    text = (f"input={args.input}\nref={args.ref}\nmode={info['mode']}\n"
            + run_config_text(model=models.cfg, sr=opts, match=match))
    _write_sidecar(args.out, text)
    return 0


def cmd_match(args, file_values) -> int:
    lr = load_image(args.lr)
    ref = load_image(args.ref)
    lr_up = lr if args.upscaled else upscale_lr(lr, args.scale)
    match = resolve("match", file_values, {"working_size": args.working_size})
    if args.working_size is None and "match.working_size" not in file_values:
        match = replace(match, working_size=default_working_size(lr_up.shape[1], lr_up.shape[0]))
    aligned, field = align_reference(lr_up, ref, white_mask(lr_up, ref.shape[2]), match)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_field(field, out / "field.tfcf")
    save_certainty_heatmap(field, out / "certainty.png")
    save_image(aligned, out / "aligned.png")
    _write_sidecar(out / "field.tfcf", run_config_text(match=match))
    log.info("mean certainty %.4f", float(field.certainty.mean()))
    return 0


def cmd_eval(args, file_values) -> int:
    report = eval_run(args.data, args.outputs, args.method, args.split, args.out,
                      config={"outputs": str(args.outputs), "method": args.method})
    print(f"{args.method}: PSNR {report.mean_psnr:.4f} dB, SSIM {report.mean_ssim:.4f} over {len(report.rows)} images")
    return 0


ABLATION_ROWS = (
    # label, use ref branch, match, warp
    ("SISR", False, False, False),
    ("RB", True, False, False),
    ("RB+M", True, True, False),
    ("RB+M+W", True, True, True),
)


def ablation_mode(match: bool, warp: bool) -> str:
    if not match:
        return "relative"
    return "aligned" if warp else "region_resize"


def run_ablation(manifest, ckpt, out_csv, workdir, split="test", kscales=(0.0, 0.5, 1.0), seed=0,
                 tile=None, tile_step=None, match: MatchConfig | None = None, threads: int = 1,
                 limit: int | None = None, mask=None, rows=ABLATION_ROWS):
    """Table-style sweep: each {RB, M, W} row at kscale 1, then the full
    method over the kscale grid.  Returns the table as a list of dicts."""
    manifest = Path(manifest)
    models = load_models(ckpt)
    samples = select_split(read_manifest(manifest), split)[:limit]
    if not samples:
        from .metrics import EmptySplitError
        raise EmptySplitError(f"empty split {split!r} in {manifest}")
    tile = tile or models.cfg.image_size
    settings = TileSettings(tile, tile_step or max(1, tile // 2), threads)
    mask = mask or ("sisr" if models.lr is not None else "white")
    configs = [(label, rb, m, w, 1.0) for label, rb, m, w in rows]
    configs += [(f"RB+M+W k={k:g}", True, True, True, float(k)) for k in kscales]
    workdir = Path(workdir)
    table = []
    cache = {}
    for label, rb, m, w, k in configs:
        key = (rb, m, w, k)
        if key in cache:
            table.append(dict(cache[key], method=label))
            continue
        outdir = workdir / label.replace("+", "_").replace(" ", "_").replace("=", "")
        outdir.mkdir(parents=True, exist_ok=True)
        for r in samples:
            lr = load_image(manifest.parent / r["lr_path"])
            ref = load_image(manifest.parent / r["ref_path"]) if rb else None
            wcfg = match or MatchConfig(working_size=default_working_size(lr.shape[1] * 4, lr.shape[0] * 4))
            out, _ = run_sr(lr, ref, models, settings, wcfg, seed=seed, mode=ablation_mode(m, w),
                            mask=mask, kscale=k)
            save_image(out, outdir / f"{r['id']}.png")
        ids = {r["id"] for r in samples}
        report = eval_run(manifest, outdir, label, split, config={"kscale": k})
        report.rows = [row for row in report.rows if row[0] in ids]
        row = {"method": label, "RB": int(rb), "M": int(m), "W": int(w), "kscale": k,
               "psnr": report.mean_psnr, "ssim": report.mean_ssim, "n": len(report.rows)}
        cache[key] = row
        table.append(row)
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=["method", "RB", "M", "W", "kscale", "psnr", "ssim", "n"])
        wr.writeheader()
        for row in table:
            wr.writerow(dict(row, psnr=f"{row['psnr']:.6f}", ssim=f"{row['ssim']:.6f}"))
    _write_sidecar(out_csv, f"data={manifest}\nckpt={ckpt}\nsplit={split}\nseed={seed}\n"
                   f"tile={settings.tile}\ntile_step={settings.step}\nmask={mask}\n"
                   + run_config_text(model=models.cfg))
    return table


def cmd_ablate(args, file_values) -> int:
    kscales = tuple(float(x) for x in args.kscales.split(",") if x.strip())
    match = None
    if args.working_size is not None or "match.working_size" in file_values:
        match = resolve("match", file_values, {"working_size": args.working_size})
    table = run_ablation(args.data, args.ckpt, args.out, args.workdir, args.split, kscales, args.seed,
                         args.tile, args.tile_step, match, args.threads, args.limit)
    for row in table:
        print(f"{row['method']:<16} PSNR {row['psnr']:.4f}  SSIM {row['ssim']:.4f}  n={row['n']}")
    return 0


# --------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="triflowsr", description="Reference-based super-resolution with a tri-branch rectified flow.")
    p.add_argument("--config", help="key=value config file (section.key=value)")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="generate a procedural paired-view dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--canvas", type=int, default=None)
    d.add_argument("--degradation", choices=("default", "desk"), default="default")

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--data", required=True, help="dataset manifest.csv")
    t.add_argument("--ckpt", required=True, help="checkpoint directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split")
    t.add_argument("--branch-init", choices=("copy", "random"))
    t.add_argument("--context-prob", type=float, help="stage 0: share of steps with self-context")
    t.add_argument("--image-size", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--latent-scale", type=float)
    t.add_argument("--working-size", type=int)

    s = sub.add_parser("sr", help="super-resolve one LR image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, help="LR image")
    s.add_argument("--out", required=True)
    s.add_argument("--ref")
    s.add_argument("--no-ref", action="store_true")
    s.add_argument("--no-match", action="store_true", help="relative-position reference tiles")
    s.add_argument("--no-warp", action="store_true", help="resize matched regions without warping")
    s.add_argument("--kscale", type=float)
    s.add_argument("--ref-layers", type=int)
    s.add_argument("--tile", type=int)
    s.add_argument("--tile-step", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mask", choices=("white", "sisr"))
    s.add_argument("--threads", type=int)
    s.add_argument("--working-size", type=int)

    m = sub.add_parser("match", help="debug the reference matching")
    m.add_argument("--lr", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--scale", type=int, default=4)
    m.add_argument("--upscaled", action="store_true", help="--lr is already at target size")
    m.add_argument("--working-size", type=int)

    e = sub.add_parser("eval", help="score an output directory against a manifest")
    e.add_argument("--data", required=True)
    e.add_argument("--outputs", required=True)
    e.add_argument("--method", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="report CSV")

    a = sub.add_parser("ablate", help="RB/M/W and kscale ablation table")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="table CSV")
    a.add_argument("--workdir", required=True, help="directory for per-row outputs")
    a.add_argument("--split", default="test")
    a.add_argument("--kscales", default="0,0.5,1")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tile", type=int)
    a.add_argument("--tile-step", type=int)
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--limit", type=int)
    a.add_argument("--working-size", type=int)
    return p


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "sr": cmd_sr, "match": cmd_match,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        file_values = load_config_file(args.config)
        return COMMANDS[args.command](args, file_values)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"triflowsr: error: {exc}", file=sys.stderr)
        return 2
    except (MissingCheckpointError, PrerequisiteError, ImageError, FileNotFoundError, ValueError,
            KeyError, OSError) as exc:
        print(f"triflowsr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
