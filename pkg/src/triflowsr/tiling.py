"""Sliding-window tile plans, feathered stitching and per-tile reference lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import Rect, as_image, crop, resize_bicubic

TILE_MODES = ("aligned", "region_resize", "relative")


@dataclass(frozen=True)
class TilePlan:
    image_w: int
    image_h: int
    tile: int
    step: int
    rects: tuple

    def __len__(self):
        return len(self.rects)


def tile_starts(dim: int, tile: int, step: int) -> list[int]:
    starts = list(range(0, dim - tile + 1, step))
    if starts[-1] != dim - tile:
        starts.append(dim - tile)
    return sorted(set(starts))


def plan_tiles(w: int, h: int, tile: int = 1024, step: int = 256) -> TilePlan:
    if tile < 1 or not 1 <= step <= tile:
        raise ValueError(f"need tile >= 1 and 1 <= step <= tile, got tile={tile} step={step}")
    if w < tile or h < tile:
        raise ValueError(f"image {w}x{h} smaller than tile {tile}; pad it first")
    xs = tile_starts(w, tile, step)
    ys = tile_starts(h, tile, step)
    rects = tuple(Rect(x, y, tile, tile) for y in ys for x in xs)
    return TilePlan(w, h, tile, step, rects)


def _ramp(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(math.pi * (np.arange(n) + 0.5) / n)


def _axis_profile(start: int, tile: int, starts: list[int]) -> np.ndarray:
    """Raised-cosine feather over the overlap with each neighbour tile."""
    prof = np.ones(tile)
    i = starts.index(start)
    if i > 0:
        left = starts[i - 1] + tile - start
        prof[:left] *= _ramp(left)
    if i < len(starts) - 1:
        right = start + tile - starts[i + 1]
        prof[tile - right:] *= _ramp(right)[::-1]
    return prof


def blend_weights(plan: TilePlan, rect: Rect) -> np.ndarray:
    xs = tile_starts(plan.image_w, plan.tile, plan.step)
    ys = tile_starts(plan.image_h, plan.tile, plan.step)
    return np.outer(_axis_profile(rect.y0, plan.tile, ys), _axis_profile(rect.x0, plan.tile, xs))


def blend_stitch(plan: TilePlan, tiles) -> np.ndarray:
    """Weighted average of overlapping tiles, accumulated in plan order."""
    tiles = list(tiles)
    if len(tiles) != len(plan.rects):
        raise ValueError(f"{len(tiles)} tiles for a plan of {len(plan.rects)}")
    channels = None
    for t in tiles:
        t = as_image(t)
        if t.shape[:2] != (plan.tile, plan.tile):
            raise ValueError(f"tile of shape {t.shape[:2]}, expected {plan.tile}x{plan.tile}")
        if channels is None:
            channels = t.shape[2]
        elif t.shape[2] != channels:
            raise ValueError("tiles disagree on channel count")
    num = np.zeros((plan.image_h, plan.image_w, channels))
    den = np.zeros((plan.image_h, plan.image_w, 1))
    for rect, t in zip(plan.rects, tiles):
        wgt = blend_weights(plan, rect)[:, :, None]
        num[rect.y0:rect.y1, rect.x0:rect.x1] += wgt * as_image(t)
        den[rect.y0:rect.y1, rect.x0:rect.x1] += wgt
    return num / den


def extract_tiles(img: np.ndarray, plan: TilePlan) -> list[np.ndarray]:
    return [crop(img, r) for r in plan.rects]


@dataclass
class TileReference:
    image: np.ndarray
    mode: str
    fallback: bool = False


def _relative_region(rect: Rect, plane_w: int, plane_h: int, raw_w: int, raw_h: int):
    sx, sy = raw_w / plane_w, raw_h / plane_h
    x0 = int(math.floor(rect.x0 * sx))
    y0 = int(math.floor(rect.y0 * sy))
    x1 = min(raw_w, max(x0 + 1, int(round(rect.x1 * sx))))
    y1 = min(raw_h, max(y0 + 1, int(round(rect.y1 * sy))))
    return x0, y0, x1, y1


def tile_reference(rect: Rect, mode: str, aligned_ref=None, raw_ref=None, field=None,
                   plane_size: tuple[int, int] | None = None) -> TileReference:
    """Reference tile for one LR-plane rect under the chosen lookup mode.

    aligned        crop of the warped, certainty-composited reference
    region_resize  bounding box of the matched coordinates, cropped from the
                   raw reference and resized (no warping)
    relative       the rect scaled by the raw/LR size ratio, no matching
    """
    if mode not in TILE_MODES:
        raise ValueError(f"unknown tile mode {mode!r}")
    if mode == "aligned":
        return TileReference(crop(aligned_ref, rect), mode)
    raw_ref = as_image(raw_ref)
    raw_h, raw_w = raw_ref.shape[:2]
    if plane_size is None:
        if field is not None:
            plane_size = (field.width, field.height)
        else:
            plane_size = (aligned_ref.shape[1], aligned_ref.shape[0])
    fallback = False
    if mode == "region_resize":
        pts = field.mapping[rect.y0:rect.y1, rect.x0:rect.x1].reshape(-1, 2)
        x0 = max(0, int(math.floor(pts[:, 0].min())))
        y0 = max(0, int(math.floor(pts[:, 1].min())))
        x1 = min(raw_w, int(math.floor(pts[:, 0].max())) + 1)
        y1 = min(raw_h, int(math.floor(pts[:, 1].max())) + 1)
        if x1 - x0 >= 1 and y1 - y0 >= 1:
            region = raw_ref[y0:y1, x0:x1]
            return TileReference(resize_bicubic(region, rect.w, rect.h), mode)
        fallback = True
    x0, y0, x1, y1 = _relative_region(rect, plane_size[0], plane_size[1], raw_w, raw_h)
    region = raw_ref[y0:y1, x0:x1]
    return TileReference(resize_bicubic(region, rect.w, rect.h), "relative", fallback)
