"""End-to-end inference: upscale, align the reference, tile, sample, stitch."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .flow import load_branch, super_resolve
from .flow.model import BranchWeights, ModelConfig
from .imagecore import as_image, crop, reflect_pad, resize_bicubic
from .matching import MatchConfig, align_reference, white_mask
from .rng import stream
from .tiling import blend_stitch, plan_tiles, tile_reference

log = logging.getLogger(__name__)

CHECKPOINT_NAMES = {"sr": "sr.ckpt", "lr": "lr.ckpt", "ref": "ref.ckpt"}
# tiles per network batch; fixed so results never depend on --threads
TILE_CHUNK = 16


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class Models:
    cfg: ModelConfig
    sr: BranchWeights
    lr: BranchWeights | None = None
    ref: BranchWeights | None = None


def checkpoint_path(ckpt_dir, role: str) -> Path:
    return Path(ckpt_dir) / CHECKPOINT_NAMES[role]


def load_models(ckpt_dir, need=("sr", "lr"), optional=("ref",)) -> Models:
    loaded, cfg = {}, None
    for role in tuple(need) + tuple(optional):
        path = checkpoint_path(ckpt_dir, role)
        if not path.is_file():
            if role in need:
                raise MissingCheckpointError(f"missing {role} checkpoint {path}")
            continue
        w, c, _ = load_branch(path)
        loaded[role] = w
        cfg = cfg or c
    return Models(cfg, loaded.get("sr"), loaded.get("lr"), loaded.get("ref"))


def upscale_lr(lr: np.ndarray, scale: int = 4) -> np.ndarray:
    lr = as_image(lr)
    return resize_bicubic(lr, lr.shape[1] * scale, lr.shape[0] * scale)


def plane_noise(seed: int, shape) -> np.ndarray:
    """One standard-normal plane for the whole image, so overlapping tiles
    start from the same noise where they overlap."""
    return stream(seed, 11).standard_normal(shape)


@dataclass(frozen=True)
class TileSettings:
    tile: int
    step: int
    threads: int = 1


def _run_chunks(fn, items, threads):
    chunks = [items[i:i + TILE_CHUNK] for i in range(0, len(items), TILE_CHUNK)]
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def tiled_super_resolve(lr_up: np.ndarray, models: Models, tiles: TileSettings, seed: int = 0,
                        ref_plane: np.ndarray | None = None, raw_ref: np.ndarray | None = None,
                        field=None, mode: str = "aligned", kscale=None, ref_layers=None):
    """Sample the whole LR-aligned plane tile by tile.

    ``ref_plane`` is the aligned reference (aligned mode); ``raw_ref`` and
    ``field`` feed the region_resize / relative lookups.  Without any
    reference the SISR path runs.  Returns (image, number of tiles).
    """
    lr_up = as_image(lr_up)
    h, w, c = lr_up.shape
    cfg = replace(models.cfg, image_size=tiles.tile)
    if kscale is not None:
        cfg = replace(cfg, kscale=kscale)
    if ref_layers is not None:
        cfg = replace(cfg, ref_layers=ref_layers)
    padded = reflect_pad(lr_up, tiles.tile, tiles.tile)
    ph, pw = padded.shape[:2]
    # ref_layers = 0 still routes the reference in; the model drops it itself
    use_ref = models.ref is not None and (ref_plane is not None or raw_ref is not None)
    if use_ref and ref_plane is not None:
        ref_plane = reflect_pad(as_image(ref_plane), tiles.tile, tiles.tile)
    plan = plan_tiles(pw, ph, tiles.tile, tiles.step)
    log.info("processing %d tiles (%dx%d, tile %d, step %d)", len(plan), pw, ph, tiles.tile, tiles.step)
    noise = plane_noise(seed, padded.shape)
    items = []
    for rect in plan.rects:
        ref_tile = None
        if use_ref:
            ref_tile = tile_reference(rect, mode, aligned_ref=ref_plane, raw_ref=raw_ref, field=field,
                                      plane_size=(w, h)).image
        items.append((crop(padded, rect), ref_tile, crop(noise, rect)))

    def work(chunk):
        lrs = np.stack([it[0] for it in chunk])
        refs = np.stack([it[1] for it in chunk]) if use_ref else None
        eps = np.stack([it[2] for it in chunk])
        return super_resolve(lrs, refs, models.sr, models.lr, models.ref if use_ref else None, cfg,
                             noise=eps)

    outs = [t for batch in _run_chunks(work, items, tiles.threads) for t in batch]
    out = blend_stitch(plan, outs)
    return out[:h, :w], len(plan)


def prepare_reference(lr_up: np.ndarray, ref: np.ndarray, match_cfg: MatchConfig, mask=None):
    """Aligned, certainty-composited reference plus the full-size field."""
    lr_up = as_image(lr_up)
    if mask is None:
        mask = white_mask(lr_up, as_image(ref).shape[2])
    return align_reference(lr_up, ref, mask, match_cfg)


def run_sr(lr: np.ndarray, ref: np.ndarray | None, models: Models, tiles: TileSettings,
           match_cfg: MatchConfig, seed: int = 0, mode: str = "aligned", mask: str = "white",
           kscale=None, ref_layers=None, scale: int = 4, lr_is_upscaled: bool = False):
    """Full pipeline for one image.  Returns (image, info dict)."""
    lr_up = as_image(lr) if lr_is_upscaled else upscale_lr(lr, scale)
    info = {"mode": "sisr" if ref is None else mode, "mask": mask}
    if ref is None or models.ref is None:
        out, n = tiled_super_resolve(lr_up, models, tiles, seed)
        info["tiles"] = n
        return out, info
    ref = as_image(ref)
    mask_img = None
    if mask == "sisr":
        mask_img, _ = tiled_super_resolve(lr_up, models, tiles, seed)
    ref_plane, field = None, None
    if mode in ("aligned", "region_resize"):
        ref_plane, field = prepare_reference(lr_up, ref, match_cfg, mask_img)
    out, n = tiled_super_resolve(lr_up, models, tiles, seed, ref_plane=ref_plane, raw_ref=ref,
                                 field=field, mode=mode, kscale=kscale, ref_layers=ref_layers)
    info["tiles"] = n
    if field is not None:
        info["mean_certainty"] = float(field.certainty.mean())
    return out, info
