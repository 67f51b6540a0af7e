from __future__ import annotations

import numpy as np
import pytest

from fishrect.camera_model import DistortionParams
from fishrect.image_core import quantize
from fishrect.patterns import scene_image
from fishrect.rect_layer import Geometry
from fishrect.synthesizer import ParamRanges, distort


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_pair(rng, size=256, channels=3):
    """Quantized (fisheye, ground truth, params, geometry) as written to disk by the synthesizer."""
    geometry = Geometry.for_size(size, size)
    src, _ = scene_image(size, size, rng, channels=channels)
    params = ParamRanges().sample(rng, geometry)
    fish = quantize(distort(src, params, geometry)) / 255.0
    return fish, quantize(src) / 255.0, params, geometry


def interior(mask, margin=8):
    mask = mask.copy()
    mask[:margin] = mask[-margin:] = False
    mask[:, :margin] = mask[:, -margin:] = False
    return mask


def centered(geometry, m, k=(0.0, 0.0, 0.0, 0.0)):
    cx, cy = geometry.center
    return DistortionParams(k=k, mu=m, mv=m, u0=cx, v0=cy)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
