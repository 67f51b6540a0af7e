"""Differentiable fisheye rectification layer.

Forward: every rectified pixel ``(u, v)`` is mapped to normalized pinhole
coordinates, pushed through the fisheye model to ``(x_f, y_f)`` and filled by
bilinear interpolation of the fisheye image.

Backward: gradients of a scalar loss with respect to the 8 distortion
parameters (chain rule through the bilinear interpolant and the fisheye
mapping) and, optionally, with respect to the fisheye image (the transpose of
the bilinear gather).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .camera_model import DistortionParams, radial_distance
from .image_core import (
    FILL_ZERO,
    LabelMap,
    as_image,
    bilinear_taps,
    gather_neighbors,
    in_bounds,
    sample_nearest,
)

DEFAULT_FOCAL_RATIO = 0.35


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    """Rectified (virtual pinhole) raster.

    ``focal`` is the pinhole focal length in pixels; output pixel ``(u, v)``
    sits at normalized coordinates ``((u - cx) / focal, (v - cy) / focal)``
    with the center at ``((W - 1) / 2, (H - 1) / 2)``.
    """

    width: int
    height: int
    focal: float

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"invalid raster size {self.width}x{self.height}")
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise GeometryError(f"focal length must be positive, got {self.focal}")

    @classmethod
    def for_size(cls, width: int, height: int, focal: Optional[float] = None) -> "Geometry":
        return cls(int(width), int(height), float(focal) if focal is not None else DEFAULT_FOCAL_RATIO * width)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pinhole_scale(self) -> float:
        return 1.0 / self.focal

    @property
    def center(self) -> tuple[float, float]:
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def theta_max(self) -> float:
        """Ray angle at the raster corner, the widest angle the raster sees."""
        cx, cy = self.center
        return float(np.arctan(np.hypot(cx, cy) / self.focal))

    def pinhole_coords(self) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        x = (u[None, :] - cx) / self.focal
        y = (v[:, None] - cy) / self.focal
        return np.broadcast_to(x, self.shape).copy(), np.broadcast_to(y, self.shape).copy()

    def to_pixels(self, x, y):
        cx, cy = self.center
        return cx + np.asarray(x) * self.focal, cy + np.asarray(y) * self.focal

    def halved(self) -> "Geometry":
        if self.width % 2 or self.height % 2:
            raise GeometryError(f"cannot halve a {self.width}x{self.height} raster")
        return Geometry(self.width // 2, self.height // 2, self.focal / 2.0)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "focal": self.focal}


@dataclass
class WarpGrid:
    geometry: Geometry
    fisheye_shape: tuple[int, int]
    xf: np.ndarray
    yf: np.ndarray
    theta: np.ndarray
    # x / rho and y / rho, zero at the origin
    dir_x: np.ndarray
    dir_y: np.ndarray
    # r(theta) under the generating params
    radius: np.ndarray

    def in_bounds(self) -> np.ndarray:
        h, w = self.fisheye_shape
        return in_bounds(self.xf, self.yf, h, w)


@dataclass
class GradientBundle:
    d_params: np.ndarray
    d_input: Optional[np.ndarray] = None
    # per-pixel dL/dx_f, dL/dy_f (channel-summed), kept for diagnostics
    d_xf: np.ndarray = field(default=None, repr=False)
    d_yf: np.ndarray = field(default=None, repr=False)


def build_grid(
    params: DistortionParams,
    geometry: Geometry,
    fisheye_shape: Optional[tuple[int, int]] = None,
) -> WarpGrid:
    x, y = geometry.pinhole_coords()
    rho = np.hypot(x, y)
    theta = np.arctan(rho)
    safe = np.where(rho > 0.0, rho, 1.0)
    dir_x = np.where(rho > 0.0, x / safe, 0.0)
    dir_y = np.where(rho > 0.0, y / safe, 0.0)
    radius = radial_distance(theta, params.k)
    xf = params.u0 + params.mu * dir_x * radius
    yf = params.v0 + params.mv * dir_y * radius
    return WarpGrid(
        geometry=geometry,
        fisheye_shape=tuple(fisheye_shape) if fisheye_shape is not None else geometry.shape,
        xf=xf,
        yf=yf,
        theta=theta,
        dir_x=dir_x,
        dir_y=dir_y,
        radius=radius,
    )


def _check_fisheye(fisheye, grid: WarpGrid) -> np.ndarray:
    fisheye = as_image(fisheye)
    if fisheye.shape[:2] != tuple(grid.fisheye_shape):
        raise GeometryError(
            f"fisheye raster is {fisheye.shape[1]}x{fisheye.shape[0]}, "
            f"grid expects {grid.fisheye_shape[1]}x{grid.fisheye_shape[0]}"
        )
    return fisheye


def rectify(fisheye, grid: WarpGrid, fill: str = FILL_ZERO) -> np.ndarray:
    """Rectified image, shape ``(H_out, W_out, C)``."""
    fisheye = _check_fisheye(fisheye, grid)
    h, w, _ = fisheye.shape
    taps = bilinear_taps(grid.xf, grid.yf, h, w, fill)
    i00, i10, i01, i11 = gather_neighbors(fisheye, taps)
    wx = taps.wx[..., None]
    wy = taps.wy[..., None]
    return (1 - wx) * (1 - wy) * i00 + wx * (1 - wy) * i10 + (1 - wx) * wy * i01 + wx * wy * i11


def rectify_labels(lbl: LabelMap, grid: WarpGrid) -> LabelMap:
    if lbl.data.shape != tuple(grid.fisheye_shape):
        raise GeometryError(
            f"label map is {lbl.width}x{lbl.height}, grid expects {grid.fisheye_shape[1]}x{grid.fisheye_shape[0]}"
        )
    return LabelMap(sample_nearest(lbl, grid.xf, grid.yf), lbl.ignore_label)


def _scatter(values: np.ndarray, yi: np.ndarray, xi: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    flat = (yi * w + xi).ravel()
    return np.bincount(flat, weights=values.ravel(), minlength=h * w).reshape(h, w)


def backward(
    fisheye,
    grid: WarpGrid,
    upstream,
    params: DistortionParams,
    want_input_grad: bool = False,
    fill: str = FILL_ZERO,
) -> GradientBundle:
    """Gradients of ``L`` given ``upstream = dL/dI_r``.

    Parameter gradients are ordered ``[k1, k2, k3, k4, mu, mv, u0, v0]`` and
    accumulated in float64 with a fixed reduction order.
    """
    fisheye = _check_fisheye(fisheye, grid)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 2:
        upstream = upstream[:, :, None]
    expected = (*grid.geometry.shape, fisheye.shape[2])
    if upstream.shape != expected:
        raise GeometryError(f"upstream gradient has shape {upstream.shape}, expected {expected}")

    h, w, c = fisheye.shape
    taps = bilinear_taps(grid.xf, grid.yf, h, w, fill)
    i00, i10, i01, i11 = gather_neighbors(fisheye, taps)
    wx = taps.wx[..., None]
    wy = taps.wy[..., None]

    # derivative of the bilinear interpolant with respect to the sample position
    dI_dx = (1 - wy) * (i10 - i00) + wy * (i11 - i01)
    dI_dy = (1 - wx) * (i01 - i00) + wx * (i11 - i10)
    g_x = np.sum(upstream * dI_dx, axis=2)
    g_y = np.sum(upstream * dI_dy, axis=2)

    theta = grid.theta
    t2 = theta * theta
    powers = [theta * t2]
    for _ in range(3):
        powers.append(powers[-1] * t2)
    radial_term = g_x * params.mu * grid.dir_x + g_y * params.mv * grid.dir_y
    d_params = np.array(
        [
            *(np.sum(radial_term * p) for p in powers),
            np.sum(g_x * grid.dir_x * grid.radius),
            np.sum(g_y * grid.dir_y * grid.radius),
            np.sum(g_x),
            np.sum(g_y),
        ],
        dtype=np.float64,
    )

    d_input = None
    if want_input_grad:
        d_input = np.zeros_like(fisheye)
        wx2 = taps.wx
        wy2 = taps.wy
        corners = (
            (taps.x0, taps.y0, taps.v00, (1 - wx2) * (1 - wy2)),
            (taps.x1, taps.y0, taps.v10, wx2 * (1 - wy2)),
            (taps.x0, taps.y1, taps.v01, (1 - wx2) * wy2),
            (taps.x1, taps.y1, taps.v11, wx2 * wy2),
        )
        for ch in range(c):
            up = upstream[:, :, ch]
            for xi, yi, valid, weight in corners:
                d_input[:, :, ch] += _scatter(up * weight * valid, yi, xi, (h, w))

    return GradientBundle(d_params=d_params, d_input=d_input, d_xf=g_x, d_yf=g_y)


def finite_diff_oracle(
    loss_fn: Callable[[np.ndarray], float],
    params,
    index: int,
    step: float,
) -> float:
    """Central difference ``(L(p + h e_i) - L(p - h e_i)) / 2h``."""
    p = np.asarray(params.to_array() if isinstance(params, DistortionParams) else params, dtype=np.float64)
    plus = p.copy()
    minus = p.copy()
    plus[index] += step
    minus[index] -= step
    return (float(loss_fn(plus)) - float(loss_fn(minus))) / (2.0 * step)


# Finite-difference steps: 1e-4 on the radial coefficients, 1e-3 on pixel units.
FD_STEPS = np.array([1e-4] * 4 + [1e-3] * 4)

# Steps for gradient verification. The loss is piecewise quadratic along
# each parameter (kinks where a sample crosses a pixel boundary), so central
# differences are exact inside a piece; small steps keep the kink crossings
# rare while staying well above float64 roundoff.
GRADCHECK_STEPS = np.array([1e-8] * 4 + [1e-7] * 4)


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    loss: float

    def relative_errors(self, analytic: Optional[np.ndarray] = None, atol: float = 1e-6) -> np.ndarray:
        """``|a - n| / max(|a|, |n|)``; pairs both below ``atol`` count as agreeing (0/0 guard)."""
        a = self.analytic if analytic is None else np.asarray(analytic)
        n = self.numeric
        denom = np.maximum(np.abs(a), np.abs(n))
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.where(denom > atol, np.abs(a - n) / denom, 0.0)
        return err


def gradient_check(
    image,
    params: DistortionParams,
    target,
    geometry: Geometry,
    fill: str = "clamp",
    steps=GRADCHECK_STEPS,
) -> GradCheckResult:
    """Analytic vs central-difference gradients of ``sum((rectify(image) - target)**2)``."""
    image = as_image(image)
    target = as_image(target)

    def loss_fn(p) -> float:
        grid = build_grid(DistortionParams.from_array(p), geometry, image.shape[:2])
        return float(np.sum((rectify(image, grid, fill) - target) ** 2))

    grid = build_grid(params, geometry, image.shape[:2])
    rec = rectify(image, grid, fill)
    analytic = backward(image, grid, 2.0 * (rec - target), params, fill=fill).d_params
    numeric = np.array([finite_diff_oracle(loss_fn, params, i, steps[i]) for i in range(8)])
    return GradCheckResult(analytic=analytic, numeric=numeric, loss=float(np.sum((rec - target) ** 2)))
