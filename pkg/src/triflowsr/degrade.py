"""Seeded synthetic degradations: blur, resize, noise, block-DCT compression.

A reduced second-order Real-ESRGAN style chain.  All randomness is drawn
from a counter-based stream keyed by the config seed, so a (seed, stream)
pair fixes the output bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import config as kv
from .imagecore import as_image, resize_bicubic
from .rng import stream


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.2, 3.0)
    down_scale: int = 4
    noise_sigma_range: tuple[float, float] = (0.005, 0.04)
    compress_quality_range: tuple[int, int] = (30, 95)
    second_order: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_sigma_range", "compress_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} exceeds max {hi}")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ValueError("sigma ranges must be non-negative")
        q0, q1 = self.compress_quality_range
        if not (1 <= q0 and q1 <= 100):
            raise ValueError("quality range must lie in 1..100")
        if self.down_scale < 1:
            raise ValueError("down_scale must be >= 1")

    def to_text(self) -> str:
        return kv.dump_kv(self)

    @classmethod
    def from_text(cls, text: str) -> "DegradationConfig":
        return kv.from_kv(cls, kv.read_kv(text))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img, dtype=np.float64)
    for i, wgt in enumerate(k):
        out += wgt * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    return blur_planes(img, sigma)


def blur_planes(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over the first two axes of any (H, W, ...) array."""
    k = gaussian_kernel1d(sigma)
    return _convolve_axis(_convolve_axis(arr, k, 0), k, 1)


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    noisy = img + rng.standard_normal(img.shape) * sigma
    return np.clip(noisy, 0.0, 1.0)


# IJG baseline luminance quantization table
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT8 = _dct_matrix(8)


def quant_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def jpeg_surrogate(img: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantization round trip, applied per channel."""
    img = as_image(img)
    q = quant_table(int(quality))
    h, w, c = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0 - 128.0
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(hb, 8, wb, 8, c).transpose(0, 2, 4, 1, 3)
    coef = _DCT8 @ blocks @ _DCT8.T
    coef = np.round(coef / q) * q
    rec = _DCT8.T @ coef @ _DCT8
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(hb * 8, wb * 8, c)
    out = (rec[:h, :w] + 128.0) / 255.0
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DegradationDraw:
    blur_sigma: float
    scale: float
    noise_sigma: float
    quality: int


def draw_parameters(cfg: DegradationConfig, rng: np.random.Generator) -> list[DegradationDraw]:
    draws = []
    for _ in range(2 if cfg.second_order else 1):
        u = rng.random(4)
        b0, b1 = cfg.blur_sigma_range
        n0, n1 = cfg.noise_sigma_range
        q0, q1 = cfg.compress_quality_range
        draws.append(DegradationDraw(
            blur_sigma=b0 + (b1 - b0) * float(u[0]),
            scale=1.0 / cfg.down_scale + (1.0 - 1.0 / cfg.down_scale) * float(u[1]),
            noise_sigma=n0 + (n1 - n0) * float(u[2]),
            quality=int(min(q1, q0 + math.floor((q1 - q0 + 1) * float(u[3])))),
        ))
    return draws


def degrade_pipeline(hr: np.ndarray, cfg: DegradationConfig, stream_id: int = 0) -> np.ndarray:
    """HR -> LR: per order, blur -> resize -> noise -> compress.

    Each order resizes to a random intermediate scale of the HR size; the
    last order then lands on exactly HR / down_scale.
    """
    hr = as_image(hr)
    h, w = hr.shape[:2]
    ds = cfg.down_scale
    if h % ds or w % ds:
        raise ValueError(f"{w}x{h} not divisible by down_scale {ds}")
    rng = stream(cfg.seed, stream_id)
    draws = draw_parameters(cfg, rng)
    out_w, out_h = w // ds, h // ds
    img = hr
    for i, d in enumerate(draws):
        img = gaussian_blur(img, d.blur_sigma)
        mid_w = max(out_w, int(round(w * d.scale)))
        mid_h = max(out_h, int(round(h * d.scale)))
        img = resize_bicubic(img, mid_w, mid_h)
        if i == len(draws) - 1:
            img = resize_bicubic(img, out_w, out_h)
        img = add_gaussian_noise(img, d.noise_sigma, rng)
        img = jpeg_surrogate(img, d.quality)
    return np.clip(img, 0.0, 1.0)
