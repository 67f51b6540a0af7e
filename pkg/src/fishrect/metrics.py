"""PSNR and SSIM on [0, 1] rasters."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image_core import as_image, load_image, to_luma
from .synthesizer import DatasetManifest

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _crop(img: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return img
    if 2 * margin >= min(img.shape[:2]):
        raise ValueError(f"margin {margin} leaves nothing of a {img.shape[1]}x{img.shape[0]} image")
    return img[margin:-margin, margin:-margin]


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, margin: int = 0, mask: Optional[np.ndarray] = None, cap: float = PSNR_CAP) -> float:
    """``10 log10(1 / MSE)`` over all channels, capped at ``cap`` dB."""
    a, b = _pair(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, dtype=bool)]
    else:
        sq = _crop(sq, margin)
    if sq.size == 0:
        raise ValueError("no pixels to compare")
    mse = float(np.mean(sq))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(w), axis=0) @ w
    return sliding_window_view(rows, len(w), axis=1) @ w


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over the valid region (windows fully inside the image)."""
    a, b = _pair(a, b)
    la, lb = to_luma(a), to_luma(b)
    if min(la.shape) < SSIM_WINDOW:
        raise ValueError(f"image too small for SSIM: need at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {la.shape[1]}x{la.shape[0]}")
    w = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _filter_valid(la, w)
    mu_b = _filter_valid(lb, w)
    var_a = _filter_valid(la * la, w) - mu_a * mu_a
    var_b = _filter_valid(lb * lb, w) - mu_b * mu_b
    cov = _filter_valid(la * lb, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, margin: int = 0) -> float:
    """Mean single-scale SSIM (11x11 Gaussian, sigma 1.5), RGB reduced to BT.601 luma."""
    a, b = _pair(a, b)
    return float(np.mean(ssim_map(_crop(a, margin), _crop(b, margin))))


@dataclass
class SampleMetric:
    id: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    samples: list[SampleMetric] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.samples])) if self.samples else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.samples])) if self.samples else float("nan")

    def summary(self) -> dict:
        return {"mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim, "count": self.count, "missing": list(self.missing)}

    def write(self, csv_path: Union[str, os.PathLike], json_path: Union[str, os.PathLike]) -> None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "psnr", "ssim"])
            for s in self.samples:
                writer.writerow([s.id, repr(s.psnr), repr(s.ssim)])
        Path(json_path).write_text(json.dumps(self.summary(), indent=2) + "\n")


_EXTS = (".png", ".ppm", ".pgm")


def _find(rectified_dir: Path, sample_id: str) -> Optional[Path]:
    for ext in _EXTS:
        p = rectified_dir / f"{sample_id}{ext}"
        if p.exists():
            return p
    return None


def evaluate_manifest(
    manifest: DatasetManifest, rectified_dir: Union[str, os.PathLike], margin: int = 0, workers: int = 1
) -> MetricReport:
    """Score ``<rectified_dir>/<sample id>.png`` against each record's ground truth.

    Records without a rectified counterpart are listed in ``missing`` and
    left out of the means.
    """
    rectified_dir = Path(rectified_dir)
    report = MetricReport()
    present = []
    for rec in manifest.records:
        path = _find(rectified_dir, rec.id)
        if path is None:
            report.missing.append(rec.id)
        else:
            present.append((rec, path))
    if report.missing:
        log.warning("%d of %d samples have no rectified image in %s", len(report.missing), len(manifest.records), rectified_dir)

    def score(item) -> SampleMetric:
        rec, path = item
        out = load_image(path)
        gt = load_image(manifest.resolve(rec.ground_truth))
        return SampleMetric(rec.id, psnr(out, gt, margin), ssim(out, gt, margin))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.samples = list(pool.map(score, present))
    else:
        report.samples = [score(item) for item in present]
    return report
