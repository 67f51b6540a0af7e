"""Procedural test rasters."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def smooth_image(height: int, width: int, rng: np.random.Generator, n_waves: int = 5, channels: int = 1) -> np.ndarray:
    """Sum of ``n_waves`` low-frequency plane sinusoids, rescaled into [0.1, 0.9]."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((height, width, channels))
    for ch in range(channels):
        acc = np.zeros((height, width))
        for _ in range(n_waves):
            period = rng.uniform(12.0, 40.0) * max(height, width) / 64.0
            angle = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.sin(2 * np.pi * (u * np.cos(angle) + v * np.sin(angle)) / period + phase)
        lo, hi = acc.min(), acc.max()
        out[:, :, ch] = 0.1 + 0.8 * (acc - lo) / (hi - lo if hi > lo else 1.0)
    return out


def edge_image(height: int, width: int, cell: int = 8) -> np.ndarray:
    """Hard-edged checkerboard with values 0.2 / 0.8."""
    v, u = np.mgrid[0:height, 0:width]
    board = ((u // cell + v // cell) % 2).astype(np.float64)
    return (0.2 + 0.6 * board)[:, :, None]


def scene_image(
    height: int, width: int, rng: np.random.Generator, channels: int = 3, n_shapes: int = 12, blur: float = 1.5
) -> np.ndarray:
    """Stand-in for a natural photograph plus a matching label map.

    Soft-edged rectangles and ellipses over a smooth background. Returns
    ``(image, labels)`` with label 0 for background and ``1..n_shapes`` for the
    shapes (later shapes occlude earlier ones).
    """
    img = smooth_image(height, width, rng, n_waves=4, channels=channels) * 0.6 + 0.2
    labels = np.zeros((height, width), dtype=np.int64)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    for idx in range(1, n_shapes + 1):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        a = rng.uniform(0.05, 0.2) * width
        b = rng.uniform(0.05, 0.2) * height
        if rng.random() < 0.5:
            mask = (np.abs(u - cx) < a) & (np.abs(v - cy) < b)
        else:
            mask = ((u - cx) / a) ** 2 + ((v - cy) / b) ** 2 < 1.0
        color = rng.uniform(0.0, 1.0, size=channels)
        img[mask] = color
        labels[mask] = idx
    for ch in range(channels):
        img[:, :, ch] = gaussian_filter(img[:, :, ch], blur, mode="nearest")
    return np.clip(img, 0.0, 1.0), labels
