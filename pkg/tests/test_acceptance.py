"""Acceptance gate: one test per primary criterion, each reporting a PASS/FAIL line."""

from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import interior, make_pair, report_criterion
from fishrect.camera_model import ProjectionKind, fit_projection, radial_distance
from fishrect.estimator import coarse_to_fine, default_init
from fishrect.image_core import LabelMap, save_image, save_labels
from fishrect.metrics import psnr, ssim
from fishrect.patterns import edge_image, scene_image, smooth_image
from fishrect.rect_layer import Geometry, backward, build_grid, gradient_check, rectify
from fishrect.synthesizer import ParamRanges, distort, generate_dataset, invert_radial


def test_c1_gradient_suite():
    rng = np.random.default_rng(2024)
    g = Geometry.for_size(64, 64)
    t0 = time.perf_counter()
    smooth_worst = 0.0
    for _ in range(10):
        img = smooth_image(64, 64, rng)
        for _ in range(10):
            p = ParamRanges().sample(rng, g)
            res = gradient_check(img, p, smooth_image(64, 64, rng), g)
            smooth_worst = max(smooth_worst, float(res.relative_errors().max()))
    edge_worst = 0.0
    edges = edge_image(64, 64)
    for _ in range(10):
        p = ParamRanges().sample(rng, g)
        res = gradient_check(edges, p, smooth_image(64, 64, rng), g)
        edge_worst = max(edge_worst, float(res.relative_errors().max()))
    elapsed = time.perf_counter() - t0
    ok = smooth_worst < 1e-3 and edge_worst < 1e-2 and elapsed < 60
    report_criterion(
        "C1 gradient suite",
        ok,
        f"100 smooth cases max rel err {smooth_worst:.2e} (<1e-3), hard-edged max {edge_worst:.2e} (<1e-2), {elapsed:.1f}s (<60s)",
    )
    assert ok


def test_c2_adjointness():
    rng = np.random.default_rng(7)
    g = Geometry.for_size(32, 32)
    worst = 0.0
    for _ in range(100):
        p = ParamRanges().sample(rng, g)
        grid = build_grid(p, g)
        v = rng.standard_normal((32, 32, 1))
        u = rng.standard_normal((32, 32, 1))
        lhs = float(np.sum(u * rectify(v, grid)))
        rhs = float(np.sum(backward(v, grid, u, p, want_input_grad=True).d_input * v))
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-9
    report_criterion("C2 adjointness", ok, f"max |<U,JV> - <J^T U,V>| = {worst:.2e} over 100 trials (<=1e-9)")
    assert ok


def test_c3_round_trip_fidelity():
    rng = np.random.default_rng(3)
    g = Geometry.for_size(256, 256)
    values = []
    for _ in range(20):
        src, _ = scene_image(256, 256, rng)
        p = ParamRanges().sample(rng, g)
        grid = build_grid(p, g)
        values.append(psnr(rectify(distort(src, p, g), grid), src, mask=interior(grid.in_bounds())))
    mean = float(np.mean(values))
    ok = mean >= 30.0
    report_criterion("C3 round-trip fidelity", ok, f"mean interior PSNR {mean:.2f} dB over 20 samples (min {min(values):.2f}) (>=30)")
    assert ok


def test_c4_radial_inversion():
    rng = np.random.default_rng(4)
    g = Geometry.for_size(256, 256)
    worst = 0.0
    for _ in range(1000):
        p = ParamRanges().sample(rng, g)
        theta = rng.uniform(0.0, g.theta_max)
        worst = max(worst, abs(invert_radial(radial_distance(theta, p.k), p, g.theta_max) - theta))
    ok = worst <= 1e-9
    report_criterion("C4 radial inversion", ok, f"max |theta - invert(r(theta))| = {worst:.2e} rad over 1000 draws (<=1e-9)")
    assert ok


@pytest.fixture(scope="module")
def recovery():
    rng = np.random.default_rng(0)
    rows = []
    t0 = time.perf_counter()
    for _ in range(10):
        fish, gt, params, g = make_pair(rng)
        truth = build_grid(params, g)
        mask = interior(truth.in_bounds())
        est, _ = coarse_to_fine(fish, gt, default_init(g), geometry=g)
        rec = rectify(fish, build_grid(est, g))
        rows.append(
            {
                "ceiling": psnr(rectify(fish, truth), gt, mask=mask),
                "recovered": psnr(rec, gt, mask=mask),
                "psnr": psnr(rec, gt),
                "ssim": ssim(rec, gt),
                "base_psnr": psnr(fish, gt),
                "base_ssim": ssim(fish, gt),
            }
        )
    return rows, time.perf_counter() - t0


def test_c5_parameter_recovery(recovery):
    rows, elapsed = recovery
    hits = sum(r["recovered"] >= r["ceiling"] - 2.0 for r in rows)
    gaps = ", ".join(f"{r['ceiling'] - r['recovered']:+.2f}" for r in rows)
    ok = hits >= 8 and elapsed < 600
    report_criterion(
        "C5 parameter recovery",
        ok,
        f"{hits}/10 pairs within 2 dB of the round-trip ceiling (>=8), {elapsed:.0f}s (<600s); ceiling-minus-recovered dB: {gaps}",
    )
    assert ok


def test_c6_beats_do_nothing_baseline(recovery):
    rows, _ = recovery
    mp = float(np.mean([r["psnr"] for r in rows]))
    ms = float(np.mean([r["ssim"] for r in rows]))
    bp = float(np.mean([r["base_psnr"] for r in rows]))
    bs = float(np.mean([r["base_ssim"] for r in rows]))
    ok = mp > bp and ms > bs
    report_criterion(
        "C6 baseline ordering",
        ok,
        f"recovered PSNR {mp:.2f} dB / SSIM {ms:.4f} vs unrectified fisheye {bp:.2f} dB / {bs:.4f} (full frames)",
    )
    assert ok


def test_c7_projection_fitting():
    eq = fit_projection(ProjectionKind.EQUIDISTANCE, f=1.0, theta_max=1.2)
    residuals = {
        kind.value: fit_projection(kind, f=1.0, theta_max=1.2).max_residual
        for kind in (ProjectionKind.STEREOGRAPHIC, ProjectionKind.EQUISOLID, ProjectionKind.ORTHOGONAL)
    }
    k_max = float(np.max(np.abs(eq.k)))
    ok = k_max <= 1e-10 and all(r < 1e-3 for r in residuals.values())
    detail = ", ".join(f"{name} {r:.1e}" for name, r in residuals.items())
    report_criterion("C7 projection fitting", ok, f"equidistance max|k| {k_max:.1e} (<=1e-10); max residuals {detail} (<1e-3)")
    assert ok


def test_c8_metric_sanity_and_determinism(tmp_path):
    rng = np.random.default_rng(8)
    a = rng.random((48, 48, 3))
    e = 0.02 * rng.standard_normal(a.shape)
    ssim_self = ssim(a, a)
    shift_err = max(abs((psnr(a + s * e, a) - psnr(a + e, a)) + 20 * np.log10(s)) for s in (0.25, 0.5, 2.0, 3.0))

    src = tmp_path / "src"
    src.mkdir()
    for i in range(2):
        img, lbl = scene_image(64, 64, rng, n_shapes=4)
        save_image(img, src / f"s{i}.png")
        save_labels(LabelMap(lbl), src / f"s{i}.pgm")
    sources = [(src / f"s{i}.png", src / f"s{i}.pgm") for i in range(2)]
    ranges = ParamRanges(samples_per_source=3)
    generate_dataset(sources, ranges, 99, tmp_path / "a", size=64)
    generate_dataset(sources, ranges, 99, tmp_path / "b", size=64, workers=2)
    identical = (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    ok = ssim_self == 1.0 and shift_err <= 1e-9 and identical
    report_criterion(
        "C8 metric sanity",
        ok,
        f"SSIM(a,a)={ssim_self!r}, PSNR shift relation err {shift_err:.1e} (<=1e-9), manifests byte-identical: {identical}",
    )
    assert ok
