"""Raster containers, sampling and file I/O.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3} and
values in ``[0, 1]``. Pixel centers sit at integer coordinates; ``x`` indexes
columns and ``y`` indexes rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

DEFAULT_IGNORE_LABEL = 255

FILL_ZERO = "zero"
FILL_CLAMP = "clamp"
FILL_MODES = (FILL_ZERO, FILL_CLAMP)


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


def as_image(data) -> np.ndarray:
    """Validate and coerce to an ``(H, W, C)`` float64 raster."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) raster, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite samples")
    return img


@dataclass
class LabelMap:
    data: np.ndarray
    ignore_label: int = DEFAULT_IGNORE_LABEL

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {data.shape}")
        if data.size and (not np.issubdtype(data.dtype, np.integer) or data.min() < 0):
            raise ValueError("label map must hold non-negative integer class IDs")
        self.data = data.astype(np.int64, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _check_coords(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN sampling coordinates rejected")
    return x, y


@dataclass
class BilinearTaps:
    """Neighbor indices, weights and validity for a set of sample points.

    ``x1 = x0 + 1`` always (not ``ceil``), so the weights stay one-sided at
    integer coordinates and the spatial derivative is defined there.
    """

    x0: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    y1: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    # validity of each neighbor (all True under clamp)
    v00: np.ndarray
    v10: np.ndarray
    v01: np.ndarray
    v11: np.ndarray


def bilinear_taps(x, y, height: int, width: int, fill: str = FILL_ZERO) -> BilinearTaps:
    if fill not in FILL_MODES:
        raise ValueError(f"unknown fill mode {fill!r}")
    x, y = _check_coords(x, y)
    fx = np.floor(x)
    fy = np.floor(y)
    wx = x - fx
    wy = y - fy
    # keep indices inside int64 range for far-away points
    fx = np.clip(fx, -2, width + 1).astype(np.int64)
    fy = np.clip(fy, -2, height + 1).astype(np.int64)
    x0, y0, x1, y1 = fx, fy, fx + 1, fy + 1
    if fill == FILL_CLAMP:
        ones = np.ones(x.shape, dtype=bool)
        return BilinearTaps(
            np.clip(x0, 0, width - 1), np.clip(y0, 0, height - 1),
            np.clip(x1, 0, width - 1), np.clip(y1, 0, height - 1),
            wx, wy, ones, ones, ones, ones,
        )
    inx0 = (x0 >= 0) & (x0 < width)
    inx1 = (x1 >= 0) & (x1 < width)
    iny0 = (y0 >= 0) & (y0 < height)
    iny1 = (y1 >= 0) & (y1 < height)
    return BilinearTaps(
        np.clip(x0, 0, width - 1), np.clip(y0, 0, height - 1),
        np.clip(x1, 0, width - 1), np.clip(y1, 0, height - 1),
        wx, wy, inx0 & iny0, inx1 & iny0, inx0 & iny1, inx1 & iny1,
    )


def gather_neighbors(img: np.ndarray, taps: BilinearTaps):
    """Return the four neighbor values ``(I00, I10, I01, I11)``, zeroed where invalid."""
    out = []
    for xi, yi, valid in (
        (taps.x0, taps.y0, taps.v00),
        (taps.x1, taps.y0, taps.v10),
        (taps.x0, taps.y1, taps.v01),
        (taps.x1, taps.y1, taps.v11),
    ):
        out.append(img[yi, xi] * valid[..., None])
    return out


def sample_bilinear(img, x, y, fill: str = FILL_ZERO) -> np.ndarray:
    """Bilinearly sample ``img`` at ``(x, y)``.

    Returns an array of shape ``x.shape + (C,)``. Out-of-raster neighbors read
    as 0 under ``fill="zero"`` and as the nearest edge pixel under
    ``fill="clamp"``.
    """
    img = as_image(img)
    h, w, _ = img.shape
    taps = bilinear_taps(x, y, h, w, fill)
    i00, i10, i01, i11 = gather_neighbors(img, taps)
    wx = taps.wx[..., None]
    wy = taps.wy[..., None]
    return (1 - wx) * (1 - wy) * i00 + wx * (1 - wy) * i10 + (1 - wx) * wy * i01 + wx * wy * i11


def in_bounds(x, y, height: int, width: int) -> np.ndarray:
    """Points whose whole bilinear footprint lies inside the raster."""
    x = np.asarray(x)
    y = np.asarray(y)
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def sample_nearest(lbl: LabelMap, x, y):
    """Nearest-neighbor label lookup, ties rounded half up."""
    x, y = _check_coords(x, y)
    xi = np.floor(x + 0.5)
    yi = np.floor(y + 0.5)
    valid = (xi >= 0) & (xi < lbl.width) & (yi >= 0) & (yi < lbl.height)
    xi = np.where(valid, xi, 0).astype(np.int64)
    yi = np.where(valid, yi, 0).astype(np.int64)
    out = np.where(valid, lbl.data[yi, xi], lbl.ignore_label)
    return out if out.ndim else int(out)


# --- file I/O -------------------------------------------------------------

_SUPPORTED_MODES = {"L": 1, "RGB": 3}


def _open(path: Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    if im.mode in ("I;16", "I;16B", "I;16L", "I", "F") or im.info.get("bits", 8) > 8:
        raise ImageFormatError(f"{path}: unsupported bit depth (mode {im.mode}); only 8-bit images are supported")
    return im


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit PNG/PPM/PGM as a ``(H, W, C)`` raster scaled by 1/255."""
    path = Path(path)
    im = _open(path)
    if im.mode == "P":
        im = im.convert("RGBA" if "transparency" in im.info else "RGB")
    if im.mode == "LA":
        im = im.convert("L")
    elif im.mode in ("RGBA", "CMYK", "YCbCr"):
        im = im.convert("RGB")
    elif im.mode == "1":
        im = im.convert("L")
    if im.mode not in _SUPPORTED_MODES:
        raise ImageFormatError(f"{path}: unsupported image mode {im.mode}")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit."""
    img = as_image(img)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _format_for(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".ppm", ".pgm", ".pnm"):
        return "PPM"
    raise ImageFormatError(f"{path}: unsupported output format {suffix!r} (use .png, .ppm or .pgm)")


def save_image(img, path: str | os.PathLike) -> None:
    path = Path(path)
    fmt = _format_for(path)
    q = quantize(img)
    if path.suffix.lower() == ".pgm" and q.shape[2] != 1:
        raise ImageFormatError(f"{path}: PGM requires a single-channel image")
    if path.suffix.lower() == ".ppm" and q.shape[2] != 3:
        raise ImageFormatError(f"{path}: PPM requires a 3-channel image")
    im = Image.fromarray(q[:, :, 0] if q.shape[2] == 1 else q, mode="L" if q.shape[2] == 1 else "RGB")
    try:
        im.save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"{path}: write failed ({exc})") from exc


def load_labels(path: str | os.PathLike, ignore_label: int = DEFAULT_IGNORE_LABEL) -> LabelMap:
    """Load a label map stored as 8-bit gray levels (PGM or PNG)."""
    path = Path(path)
    im = _open(path)
    if im.mode != "L":
        raise ImageFormatError(f"{path}: label maps must be single-channel 8-bit, got mode {im.mode}")
    return LabelMap(np.asarray(im, dtype=np.int64), ignore_label)


def save_labels(lbl: LabelMap, path: str | os.PathLike) -> None:
    path = Path(path)
    fmt = _format_for(path)
    if lbl.data.size and lbl.data.max() > 255:
        raise ValueError(f"{path}: class IDs above 255 cannot be stored as 8-bit gray levels")
    im = Image.fromarray(lbl.data.astype(np.uint8), mode="L")
    try:
        im.save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"{path}: write failed ({exc})") from exc


def to_luma(img) -> np.ndarray:
    """BT.601 luma as an ``(H, W)`` array."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.array([0.299, 0.587, 0.114])


def downsample2(img) -> np.ndarray:
    """2x2 box-filter decimation."""
    img = as_image(img)
    h, w, c = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"cannot halve a {w}x{h} raster")
    return img.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
