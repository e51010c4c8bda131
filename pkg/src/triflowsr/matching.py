"""Reference matching: dense ZNCC correspondence at a reduced working
resolution, field upscaling, warping and certainty compositing.

The pipeline is deterministic; every output pixel is computed independently
of evaluation order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .degrade import blur_planes
from .imagecore import as_image, resize_bicubic, save_image, to_gray, warp_bilinear

FIELD_MAGIC = b"TFCF"
FIELD_VERSION = 1


@dataclass
class CorrespondenceField:
    """Per-pixel (x, y) coordinates into a reference image plus certainty.

    ``ref_w``/``ref_h`` give the frame the coordinates live in;
    ``src_ref_w``/``src_ref_h`` the original reference size, used when the
    field is rescaled to full resolution.
    """

    mapping: np.ndarray  # (H, W, 2)
    certainty: np.ndarray  # (H, W)
    ref_w: int
    ref_h: int
    src_ref_w: int
    src_ref_h: int

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.float64)
        self.certainty = np.asarray(self.certainty, dtype=np.float64)
        if self.mapping.ndim != 3 or self.mapping.shape[2] != 2:
            raise ValueError(f"mapping must be (H, W, 2), got {self.mapping.shape}")
        if self.certainty.shape != self.mapping.shape[:2]:
            raise ValueError("certainty and mapping sizes differ")
        if not np.all(np.isfinite(self.mapping)):
            raise ValueError("mapping contains non-finite coordinates")
        if np.any(self.certainty < 0) or np.any(self.certainty > 1):
            raise ValueError("certainty outside [0, 1]")

    @property
    def height(self) -> int:
        return self.mapping.shape[0]

    @property
    def width(self) -> int:
        return self.mapping.shape[1]

    @classmethod
    def identity(cls, w: int, h: int, certainty: float = 1.0) -> "CorrespondenceField":
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        return cls(np.stack([xs, ys], -1), np.full((h, w), float(certainty)), w, h, w, h)


@dataclass(frozen=True)
class MatchConfig:
    working_size: int = 560
    patch: int = 9
    search_radius: int | None = None  # None -> working_size // 4
    certainty_floor: float = 0.3
    stride: int = 2
    consistency: bool = True
    coherence: bool = True
    subpixel: bool = True

    def __post_init__(self):
        if self.patch % 2 == 0 or self.patch < 1:
            raise ValueError("patch must be odd")
        if self.working_size < self.patch:
            raise ValueError("working_size must be >= patch")
        if self.radius < 1:
            raise ValueError("search_radius must be >= 1")
        if not 0.0 <= self.certainty_floor <= 1.0:
            raise ValueError("certainty_floor must lie in [0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def radius(self) -> int:
        return self.search_radius if self.search_radius is not None else self.working_size // 4


# ------------------------------------------------------------------ ZNCC

def _box_sum(img: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window (valid positions)."""
    c = np.cumsum(np.cumsum(img, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


_SIGMA_EPS = 1e-4


def _local_stats(img: np.ndarray, k: int):
    n = k * k
    mean = _box_sum(img, k) / n
    var = np.maximum(_box_sum(img * img, k) / n - mean * mean, 0.0)
    return mean, np.sqrt(var)


def _zncc_points(a_pad, b_pad, py, px, dy, dx, half, r):
    """Exact ZNCC for explicit (point, displacement) pairs."""
    k = 2 * half + 1
    oy, ox = np.mgrid[0:k, 0:k]
    ay = py[:, None] + oy.ravel()[None, :]
    ax = px[:, None] + ox.ravel()[None, :]
    pa = a_pad[ay, ax]
    pb = b_pad[ay + r + dy[:, None], ax + r + dx[:, None]]
    pa = pa - pa.mean(axis=1, keepdims=True)
    pb = pb - pb.mean(axis=1, keepdims=True)
    sa = np.sqrt((pa * pa).mean(axis=1))
    sb = np.sqrt((pb * pb).mean(axis=1))
    ok = (sa > _SIGMA_EPS) & (sb > _SIGMA_EPS)
    score = np.where(ok, (pa * pb).mean(axis=1) / np.where(ok, sa * sb, 1.0), 0.0)
    return score


def _displacements(r: int):
    d = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    # nearest first, so ties resolve towards the smaller displacement
    d.sort(key=lambda t: (t[0] * t[0] + t[1] * t[1], t[0], t[1]))
    return d


def _interp_grid(values: np.ndarray, stride: int, out_h: int, out_w: int, extrapolate: bool):
    """Bilinear densification of a stride-spaced grid onto every pixel."""
    gh, gw = values.shape[:2]
    sy = np.arange(out_h) / stride
    sx = np.arange(out_w) / stride
    return _bilinear_axes(values, sy, sx, extrapolate)


def _bilinear_axes(values, sy, sx, extrapolate):
    gh, gw = values.shape[:2]

    def axis(s, n):
        if n == 1:
            return np.zeros(len(s), dtype=int), np.zeros(len(s), dtype=int), np.zeros(len(s))
        if not extrapolate:
            s = np.clip(s, 0.0, n - 1.0)
        i0 = np.clip(np.floor(s).astype(int), 0, n - 2)
        return i0, i0 + 1, s - i0

    y0, y1, fy = axis(sy, gh)
    x0, x1, fx = axis(sx, gw)
    extra = (None,) * (values.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    v00 = values[y0][:, x0]
    v01 = values[y0][:, x1]
    v10 = values[y1][:, x0]
    v11 = values[y1][:, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _fill_invalid(disp: np.ndarray, valid: np.ndarray, sigma: float) -> np.ndarray:
    """Replace displacements at invalid grid points by a Gaussian-weighted
    average of valid neighbours (normalized convolution)."""
    if valid.all():
        return disp
    if not valid.any():
        return np.zeros_like(disp)
    w = valid.astype(np.float64)[:, :, None]
    out = disp.copy()
    todo = ~valid
    s = sigma
    while todo.any() and s <= 4 * max(disp.shape[:2]):
        num = blur_planes(disp * w, s)
        den = blur_planes(w, s)[:, :, 0]
        ok = todo & (den > 1e-6)
        out[ok] = num[ok] / den[ok][:, None]
        todo &= ~ok
        s *= 2
    out[todo] = 0.0
    return out


def _coherent(dy: np.ndarray, dx: np.ndarray, tol: int = 1) -> np.ndarray:
    """True where a grid displacement agrees with the median of its 3x3
    neighbourhood; chance matches on unrelated content scatter at random."""
    def med(d):
        p = np.pad(d, 1, mode="edge")
        h, w = d.shape
        stack = [p[i:i + h, j:j + w] for i in range(3) for j in range(3)]
        return np.median(np.stack(stack), axis=0)
    return (np.abs(dy - med(dy)) <= tol) & (np.abs(dx - med(dx)) <= tol)


def coarse_match(lr_up: np.ndarray, ref: np.ndarray, cfg: MatchConfig = MatchConfig()) -> CorrespondenceField:
    """Brute-force ZNCC search between both images resized to the working size.

    Returns a field over the working grid whose coordinates point into the
    working-size reference.  Certainty is the clamped ZNCC score, zeroed
    below ``certainty_floor`` and where the reverse search disagrees.
    """
    lr_up, ref = as_image(lr_up), as_image(ref)
    ws, k, r, stride = cfg.working_size, cfg.patch, cfg.radius, cfg.stride
    half = k // 2
    a = to_gray(resize_bicubic(lr_up, ws, ws))
    b = to_gray(resize_bicubic(ref, ws, ws))
    a_pad = np.pad(a, half, mode="edge")
    b_pad = np.pad(b, half + r, mode="edge")
    mu_a, sd_a = _local_stats(a_pad, k)  # (ws, ws)
    mu_b, sd_b = _local_stats(b_pad, k)  # (ws + 2r, ws + 2r)

    gy = np.arange(0, ws, stride)
    gx = np.arange(0, ws, stride)
    best = np.full((len(gy), len(gx)), -np.inf)
    best_dy = np.zeros(best.shape, dtype=int)
    best_dx = np.zeros(best.shape, dtype=int)
    bwd = np.full((ws, ws), -np.inf)
    bwd_dy = np.zeros((ws, ws), dtype=int)
    bwd_dx = np.zeros((ws, ws), dtype=int)
    n = float(k * k)
    ok_a = sd_a > _SIGMA_EPS
    for dy, dx in _displacements(r):
        ys, xs = r + dy, r + dx
        b_win = b_pad[ys:ys + ws + 2 * half, xs:xs + ws + 2 * half]
        e_ab = _box_sum(a_pad * b_win, k) / n
        m_b = mu_b[ys:ys + ws, xs:xs + ws]
        s_b = sd_b[ys:ys + ws, xs:xs + ws]
        ok = ok_a & (s_b > _SIGMA_EPS)
        score = np.where(ok, (e_ab - mu_a * m_b) / np.where(ok, sd_a * s_b, 1.0), 0.0)
        sg = score[np.ix_(gy, gx)]
        better = sg > best
        best = np.where(better, sg, best)
        best_dy = np.where(better, dy, best_dy)
        best_dx = np.where(better, dx, best_dx)
        if cfg.consistency:
            # reverse search: ref pixel q = p + d collects the score of lr pixel p
            qy0, qy1 = max(0, dy), min(ws, ws + dy)
            qx0, qx1 = max(0, dx), min(ws, ws + dx)
            cand = score[qy0 - dy:qy1 - dy, qx0 - dx:qx1 - dx]
            cur = bwd[qy0:qy1, qx0:qx1]
            upd = cand > cur
            cur[upd] = cand[upd]
            bwd_dy[qy0:qy1, qx0:qx1][upd] = dy
            bwd_dx[qy0:qy1, qx0:qx1][upd] = dx

    py, px = np.meshgrid(gy, gx, indexing="ij")
    sub_x = np.zeros(best.shape)
    sub_y = np.zeros(best.shape)
    if cfg.subpixel:
        flat = (py.ravel(), px.ravel(), best_dy.ravel(), best_dx.ravel())
        for axis_name in ("x", "y"):
            ey, ex = (0, 1) if axis_name == "x" else (1, 0)
            sp = _zncc_points(a_pad, b_pad, flat[0], flat[1],
                              np.clip(flat[2] + ey, -r, r), np.clip(flat[3] + ex, -r, r), half, r)
            sm = _zncc_points(a_pad, b_pad, flat[0], flat[1],
                              np.clip(flat[2] - ey, -r, r), np.clip(flat[3] - ex, -r, r), half, r)
            s0 = best.ravel()
            den = sp - 2 * s0 + sm
            inner = np.abs(flat[2 + (0 if axis_name == "y" else 1)]) < r
            off = np.where((den < -1e-9) & inner, 0.5 * (sm - sp) / np.where(den < -1e-9, den, -1.0), 0.0)
            off = np.clip(off, -0.5, 0.5).reshape(best.shape)
            if axis_name == "x":
                sub_x = off
            else:
                sub_y = off

    cert = np.maximum(best, 0.0)
    cert[cert < cfg.certainty_floor] = 0.0
    if cfg.consistency:
        qy = np.clip(py + best_dy, 0, ws - 1)
        qx = np.clip(px + best_dx, 0, ws - 1)
        back_y = qy - bwd_dy[qy, qx]
        back_x = qx - bwd_dx[qy, qx]
        agree = (np.abs(back_y - py) <= 1) & (np.abs(back_x - px) <= 1)
        cert[~agree] = 0.0
    if cfg.coherence:
        cert[~_coherent(best_dy, best_dx)] = 0.0

    disp = np.stack([best_dx + sub_x, best_dy + sub_y], axis=-1).astype(np.float64)
    disp = _fill_invalid(disp, cert > 0, sigma=2.0)
    grid_map = disp + np.stack([px, py], axis=-1)
    mapping = _interp_grid(grid_map, stride, ws, ws, extrapolate=True)
    certainty = np.clip(_interp_grid(cert, stride, ws, ws, extrapolate=False), 0.0, 1.0)
    rh, rw = ref.shape[:2]
    return CorrespondenceField(mapping, certainty, ws, ws, rw, rh)


def upscale_field(field: CorrespondenceField, out_w: int, out_h: int) -> CorrespondenceField:
    """Resample the field onto an out_w x out_h grid and rescale coordinates
    into the original reference frame (pixel-centre convention)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    sy = (np.arange(out_h) + 0.5) * (field.height / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (field.width / out_w) - 0.5
    mapping = _bilinear_axes(field.mapping, sy, sx, extrapolate=True)
    certainty = np.clip(_bilinear_axes(field.certainty, sy, sx, extrapolate=False), 0.0, 1.0)
    kx = field.src_ref_w / field.ref_w
    ky = field.src_ref_h / field.ref_h
    mapping = np.stack([(mapping[..., 0] + 0.5) * kx - 0.5,
                        (mapping[..., 1] + 0.5) * ky - 0.5], axis=-1)
    return CorrespondenceField(mapping, certainty, field.src_ref_w, field.src_ref_h,
                               field.src_ref_w, field.src_ref_h)


def compose_reference(ref: np.ndarray, field: CorrespondenceField, mask: np.ndarray) -> np.ndarray:
    """C * warp(ref) + (1 - C) * mask."""
    mask = as_image(mask)
    if mask.shape[:2] != (field.height, field.width):
        raise ValueError(f"mask {mask.shape[:2]} vs field {(field.height, field.width)}")
    warped = warp_bilinear(ref, field)
    c = field.certainty[:, :, None]
    return c * warped + (1.0 - c) * mask


def white_mask(like: np.ndarray, channels: int | None = None) -> np.ndarray:
    like = as_image(like)
    return np.ones(like.shape[:2] + (channels or like.shape[2],))


def align_reference(lr: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None,
                    cfg: MatchConfig = MatchConfig()):
    """Match at working size, upscale the field to ``lr``'s size, warp and
    composite.  ``lr`` is the bicubic-upscaled LR image."""
    lr, ref = as_image(lr), as_image(ref)
    if mask is None:
        mask = white_mask(lr, ref.shape[2])
    coarse = coarse_match(lr, ref, cfg)
    full = upscale_field(coarse, lr.shape[1], lr.shape[0])
    return compose_reference(ref, full, mask), full


# --------------------------------------------------------- serialization

def save_field(field: CorrespondenceField, path) -> None:
    header = FIELD_MAGIC + struct.pack("<7I", FIELD_VERSION, field.width, field.height,
                                       field.ref_w, field.ref_h, field.src_ref_w, field.src_ref_h)
    body = field.mapping.astype("<f4").tobytes() + field.certainty.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_field(path) -> CorrespondenceField:
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a correspondence field file")
    version, w, h, rw, rh, srw, srh = struct.unpack("<7I", raw[4:32])
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported field version {version}")
    n = w * h
    need = 32 + 4 * (3 * n)
    if len(raw) < need:
        raise ValueError(f"{path}: truncated field file")
    mapping = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=32).reshape(h, w, 2)
    cert = np.frombuffer(raw, dtype="<f4", count=n, offset=32 + 8 * n).reshape(h, w)
    return CorrespondenceField(mapping.astype(np.float64), np.clip(cert.astype(np.float64), 0, 1),
                               rw, rh, srw, srh)


def save_certainty_heatmap(field: CorrespondenceField, path) -> None:
    save_image(field.certainty[:, :, None], path)
