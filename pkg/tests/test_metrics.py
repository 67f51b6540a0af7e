from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from fishrect.image_core import save_image
from fishrect.metrics import MetricReport, SampleMetric, evaluate_manifest, psnr, ssim
from fishrect.patterns import scene_image
from fishrect.synthesizer import ParamRanges, generate_dataset

C1 = 0.01**2
C2 = 0.03**2


def ssim_scalar(a, b):
    """Loop-based SSIM over valid 11x11 windows."""
    g = np.array([math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)])
    g /= g.sum()
    w = np.outer(g, g)
    h, wd = a.shape
    vals = []
    for y in range(h - 10):
        for x in range(wd - 10):
            pa = a[y : y + 11, x : x + 11]
            pb = b[y : y + 11, x : x + 11]
            ma = float(np.sum(w * pa))
            mb = float(np.sum(w * pb))
            va = float(np.sum(w * pa * pa)) - ma * ma
            vb = float(np.sum(w * pb * pb)) - mb * mb
            cov = float(np.sum(w * pa * pb)) - ma * mb
            vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_psnr_examples(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    b = np.full((4, 4), 0.1)
    assert psnr(np.zeros((4, 4)), b) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_shift_relation(rng):
    a = rng.random((16, 16, 3))
    e = rng.standard_normal((16, 16, 3)) * 0.01
    for s in (0.5, 2.0, 3.7):
        assert psnr(a + s * e, a) - psnr(a + e, a) == pytest.approx(-20 * math.log10(s), abs=1e-9)


def test_psnr_margin_and_mask(rng):
    a = rng.random((20, 20))
    b = a.copy()
    b[0, 0] = 1 - b[0, 0]
    assert psnr(a, b, margin=2) == 100.0
    mask = np.ones((20, 20), bool)
    mask[0, 0] = False
    assert psnr(a, b, mask=mask) == 100.0


def test_ssim_identity_and_symmetry(rng):
    a = rng.random((32, 40, 3))
    b = rng.random((32, 40, 3))
    assert ssim(a, a) == 1.0
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_matches_loop_reference(rng):
    a = rng.random((20, 23))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_scalar(a, b), abs=1e-12)


def test_ssim_matches_skimage(rng):
    skm = pytest.importorskip("skimage.metrics")
    img, _ = scene_image(48, 48, rng, channels=1)
    a = img[:, :, 0]
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    ref = skm.structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    # skimage averages over the full image after cropping (win_size - 1) / 2 from every side,
    # which is exactly the valid region here
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_inverted_checkerboard_is_negative():
    yy, xx = np.mgrid[0:11, 0:11]
    a = ((xx + yy) % 2).astype(float)
    assert ssim(a, 1 - a) < 0
    assert ssim(a, 1 - a) == pytest.approx(ssim_scalar(a, 1 - a), abs=1e-12)


def test_ssim_constant_closed_form():
    a, b = 0.2, 0.7
    expected = (2 * a * b + C1) * C2 / ((a * a + b * b + C1) * C2)
    assert ssim(np.full((12, 12), a), np.full((12, 12), b)) == pytest.approx(expected, abs=1e-12)


def test_ssim_rgb_uses_luma(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    w = np.array([0.299, 0.587, 0.114])
    assert ssim(a, b) == pytest.approx(ssim(a @ w, b @ w), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError, match="too small"):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_report_means_and_export(tmp_path):
    r = MetricReport([SampleMetric("a", 10.0, 0.5), SampleMetric("b", 20.0, 0.7)])
    assert r.mean_psnr == 15.0 and r.mean_ssim == pytest.approx(0.6)
    r.write(tmp_path / "m.csv", tmp_path / "m.json")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["sample_id", "psnr", "ssim"] and len(rows) == 3
    summary = json.loads((tmp_path / "m.json").read_text())
    assert summary["count"] == 2 and summary["mean_psnr"] == 15.0


@pytest.fixture
def dataset(tmp_path, rng):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(2):
        save_image(scene_image(64, 64, rng)[0], src / f"s{i}.png")
    return generate_dataset(sorted(src.iterdir()), ParamRanges(samples_per_source=2), 0, tmp_path / "ds", size=64)


def test_evaluate_ground_truth_is_perfect(tmp_path, dataset):
    out = tmp_path / "rect"
    out.mkdir()
    for r in dataset.records:
        (out / f"{r.id}.png").write_bytes(dataset.resolve(r.ground_truth).read_bytes())
    report = evaluate_manifest(dataset, out)
    assert report.count == 4 and not report.missing
    assert report.mean_psnr == 100.0 and report.mean_ssim == 1.0


def test_evaluate_fisheye_baseline_and_missing(tmp_path, dataset):
    out = tmp_path / "rect"
    out.mkdir()
    for r in dataset.records[1:]:
        (out / f"{r.id}.png").write_bytes(dataset.resolve(r.fisheye).read_bytes())
    report = evaluate_manifest(dataset, out, workers=2)
    assert report.missing == [dataset.records[0].id]
    assert report.count == 3
    assert report.mean_psnr < 30.0
    assert report.mean_psnr == pytest.approx(np.mean([s.psnr for s in report.samples]))
    assert report.mean_ssim == pytest.approx(np.mean([s.ssim for s in report.samples]))
