"""Raster container helpers, lossless file I/O and resampling.

Images are plain numpy arrays of shape (H, W, C) with C in {1, 3} and
values in [0, 1].  Nothing here keeps state, so every function is safe to
call from several threads at once.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin


class ImageError(Exception):
    pass


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class MalformedHeaderError(ImageError):
    pass


class TruncatedImageError(ImageError):
    pass


class ImageWriteError(ImageError, OSError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"invalid rect {self}")

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h


def as_image(arr) -> np.ndarray:
    """Coerce a 2-D or 3-D array into an (H, W, C) float image."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("empty image")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


def crop(img: np.ndarray, rect: Rect) -> np.ndarray:
    h, w = img.shape[:2]
    if rect.x1 > w or rect.y1 > h:
        raise ValueError(f"{rect} outside {w}x{h} image")
    return img[rect.y0:rect.y1, rect.x0:rect.x1]


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma as a 2-D array."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


# ---------------------------------------------------------------- file I/O

def encode_u8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize, rounding halves away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def decode_u8(data: np.ndarray, maxval: int = 255) -> np.ndarray:
    return data.astype(np.float64) / float(maxval)


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _parse_pnm(raw: bytes) -> np.ndarray:
    magic = raw[:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise UnsupportedFormatError(f"unsupported PNM magic {magic!r}")
    fields = []
    pos = 2
    n = len(raw)
    while len(fields) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("PNM header ended early")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise MalformedHeaderError(f"non-numeric PNM header field {tok!r}")
        fields.append(int(tok))
    if pos >= n:
        raise TruncatedImageError("PNM header ended early")
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad PNM dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise MalformedHeaderError(f"unsupported PNM maxval {maxval}")
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) < need:
        raise TruncatedImageError(f"PNM raster has {len(body)} of {need} bytes")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return decode_u8(data, maxval)


def _parse_png(raw: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            mode = im.mode
            if mode in ("RGBA", "P", "CMYK", "YCbCr"):
                im = im.convert("RGB")
            elif mode == "LA":
                im = im.convert("L")
            elif mode == "1":
                im = im.convert("L")
            elif mode not in ("L", "RGB"):
                raise UnsupportedFormatError(f"unsupported PNG mode {mode}")
            data = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageError):
            raise
        if "truncated" in str(exc).lower() or len(raw) < 64:
            raise TruncatedImageError(str(exc)) from exc
        raise TruncatedImageError(f"corrupt PNG stream: {exc}") from exc
    return decode_u8(as_image(data))


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PGM/PPM as float values v/255."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"not found: {path}")
    raw = path.read_bytes()
    if raw.startswith(_PNG_MAGIC):
        return _parse_png(raw)
    if raw[:2] in (b"P5", b"P6"):
        return _parse_pnm(raw)
    raise UnsupportedFormatError(f"unsupported image format: {path}")


def save_image(img: np.ndarray, path, text: dict | None = None) -> None:
    """Write PNG (by default) or PGM/PPM, picked from the file suffix.

    ``text`` entries go into PNG tEXt chunks; PNM files ignore them.
    """
    img = as_image(img)
    path = Path(path)
    data = encode_u8(img)
    suffix = path.suffix.lower()
    try:
        if suffix in (".ppm", ".pgm", ".pnm"):
            c = data.shape[2]
            if suffix == ".pgm" and c != 1 or suffix == ".ppm" and c != 3:
                raise ValueError(f"{c}-channel image cannot be written as {suffix}")
            magic = b"P5" if c == 1 else b"P6"
            header = b"%s\n%d %d\n255\n" % (magic, data.shape[1], data.shape[0])
            payload = header + data.tobytes()
            with open(path, "wb") as fh:
                fh.write(payload)
        else:
            arr = data[:, :, 0] if data.shape[2] == 1 else data
            im = Image.fromarray(arr, mode="L" if data.shape[2] == 1 else "RGB")
            info = None
            if text:
                info = PngImagePlugin.PngInfo()
                for key, value in text.items():
                    info.add_text(str(key), str(value))
            with open(path, "wb") as fh:
                im.save(fh, format="PNG", pnginfo=info, optimize=False)
    except OSError as exc:
        raise ImageWriteError(f"cannot write {path}: {exc}") from exc


def read_png_text(path) -> dict:
    with Image.open(os.fspath(path)) as im:
        return dict(getattr(im, "text", {}) or {})


# -------------------------------------------------------------- resampling

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis.

    Pixel centres follow the align-corners-false convention; taps falling
    outside the source are folded onto the nearest edge sample.
    """
    scale = n_out / n_in
    support = 2.0
    stretch = 1.0
    if antialias and scale < 1.0:
        stretch = 1.0 / scale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    radius = support * stretch
    lo = np.floor(centers - radius).astype(int)
    taps = int(np.ceil(2 * radius)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((idx - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def resize_bicubic(img: np.ndarray, out_w: int, out_h: int, antialias: bool = True) -> np.ndarray:
    img = as_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    h, w, c = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    out = np.einsum("ij,jkc->ikc", wy, img.astype(np.float64))
    return np.einsum("lk,ikc->ilc", wx, out)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates, clamping to the border."""
    img = as_image(img)
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def warp_bilinear(img: np.ndarray, field) -> np.ndarray:
    """Pull ``img`` through a correspondence mapping.

    ``field`` is a CorrespondenceField or a bare (H, W, 2) array of (x, y)
    source coordinates; the output has the field's spatial size.
    """
    coords = np.asarray(getattr(field, "mapping", field), dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise ValueError(f"mapping must be (H, W, 2), got {coords.shape}")
    expected = getattr(field, "height", None), getattr(field, "width", None)
    if expected[0] is not None and coords.shape[:2] != expected:
        raise ValueError("field dimensions disagree with its mapping array")
    return bilinear_sample(img, coords[..., 0], coords[..., 1])


def identity_mapping(w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def reflect_pad(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Pad on the bottom/right by reflection up to at least the given size."""
    h, w = img.shape[:2]
    ph, pw = max(0, out_h - h), max(0, out_w - w)
    if ph == 0 and pw == 0:
        return img
    # numpy's reflect mode cannot pad by more than the image extent
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode)
