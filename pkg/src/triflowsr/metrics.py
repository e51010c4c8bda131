"""Full-reference quality metrics and dataset evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import as_image, load_image, to_gray

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    tmp = sum(g[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(g[j] * tmp[:, j:w - n + 1 + j] for j in range(n))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on luma, Gaussian window, valid positions only."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} smaller than the {window}x{window} window")
    x = to_gray(a).astype(np.float64)
    y = to_gray(b).astype(np.float64)
    if np.array_equal(x, y):
        return 1.0
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = _gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


class EmptySplitError(ValueError):
    pass


class MissingOutputsError(FileNotFoundError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"missing outputs for ids: {', '.join(self.ids)}")


@dataclass
class EvalReport:
    method: str
    rows: list = field(default_factory=list)  # (id, method, psnr, ssim)
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[3] for r in self.rows]))

    def write_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "method", "psnr", "ssim"])
            for rid, method, p, s in self.rows:
                w.writerow([rid, method, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["MEAN", self.method, f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        meta = dict(self.config, ssim_channel="luma_bt601", psnr_peak=1.0)
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def select_split(rows: list[dict], split: str) -> list[dict]:
    if split == "all":
        return list(rows)
    return [r for r in rows if r["split"] == split]


def eval_run(manifest, outputs_dir, method: str, split: str = "test",
             out_csv=None, config: dict | None = None) -> EvalReport:
    """Score ``outputs_dir/<id>.png`` against each manifest row's HR image."""
    manifest = Path(manifest)
    rows = select_split(read_manifest(manifest), split)
    if not rows:
        raise EmptySplitError(f"empty split {split!r} in {manifest}")
    outputs_dir = Path(outputs_dir)
    missing = [r["id"] for r in rows if not (outputs_dir / f"{r['id']}.png").is_file()]
    if missing:
        raise MissingOutputsError(missing)
    report = EvalReport(method=method, config=dict(config or {}, split=split))
    for r in rows:
        hr = load_image(manifest.parent / r["hr_path"])
        out = load_image(outputs_dir / f"{r['id']}.png")
        report.rows.append((r["id"], method, psnr(out, hr), ssim(out, hr)))
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
