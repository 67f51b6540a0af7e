"""Distortion parameter recovery by direct optimization.

Instead of regressing parameters with a CNN, the parameters of a single
(fisheye, ground truth) pair are fitted by ADAGRAD on the summed squared
reconstruction error, with gradients from :func:`rect_layer.backward`.

The optimizer runs in a linear reparameterization of the 8 parameters. The
default ("warp") whitens by the mean Gauss-Newton metric of the warp, so one
unit along any direction moves the sampling grid by one pixel RMS; this keeps
the strongly correlated radial coefficients and focal scales from forming a
narrow valley. "width" simply expresses pixel-unit parameters in image
widths.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .camera_model import PARAM_NAMES, DistortionParams, is_monotonic
from .image_core import FILL_CLAMP, as_image, downsample2
from .rect_layer import Geometry, GeometryError, WarpGrid, backward, build_grid, rectify

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: "LossReport"):
        super().__init__(message)
        self.report = report


@dataclass
class Schedule:
    # in RMS pixels of grid motion for "warp", in widths / raw k for "width"
    lr: float = 0.3
    eps: float = 1e-8
    iters: int = 500
    levels: int = 3
    margin: int = 8
    fill: str = FILL_CLAMP
    # lr multiplier applied once per step from the coarsest level towards the finest
    level_decay: float = 0.5
    precondition: str = "warp"
    # eigenvalue floor of the warp metric, relative to its largest eigenvalue
    eig_floor: float = 1e-3


@dataclass
class TraceEntry:
    iteration: int
    loss: float
    params: DistortionParams
    grad_norm: float


@dataclass
class LossReport:
    trace: list[TraceEntry] = field(default_factory=list)
    # set after the run: whether the returned params are monotonic on the field of view
    monotonic: Optional[bool] = None

    @property
    def best(self) -> TraceEntry:
        return min(self.trace, key=lambda e: e.loss)

    @property
    def loss(self) -> float:
        return self.best.loss

    def to_csv(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", *PARAM_NAMES, "grad_norm"])
            for e in self.trace:
                writer.writerow([e.iteration, repr(e.loss), *(repr(v) for v in e.params.to_list()), repr(e.grad_norm)])


@dataclass
class OptimizerState:
    params: DistortionParams
    accum: np.ndarray
    lr: float
    eps: float = 1e-8
    iteration: int = 0
    # optimizer coordinates z relate to params by dP = basis @ dz
    basis: np.ndarray = field(default_factory=lambda: np.eye(8))

    @classmethod
    def initial(cls, params: DistortionParams, lr: float, eps: float = 1e-8, basis=None) -> "OptimizerState":
        """``basis`` may be an 8x8 matrix, a per-component scale vector or None (identity)."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        if basis is None:
            basis = np.eye(8)
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape == (8,):
            basis = np.diag(basis)
        if basis.shape != (8, 8):
            raise ValueError(f"basis must be 8x8 or an 8-vector, got shape {basis.shape}")
        return cls(params=params, accum=np.zeros(8), lr=float(lr), eps=float(eps), basis=basis)


def adagrad_step(state: OptimizerState, grad) -> OptimizerState:
    """One ADAGRAD update; returns a new state.

    ``grad`` is ``dL/dP`` in parameter units; it is mapped to the optimizer's
    units before accumulation.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (8,) or not np.isfinite(grad).all():
        raise ValueError(f"gradient must be a finite 8-vector, got {grad!r}")
    g = state.basis.T @ grad
    accum = state.accum + g * g
    dz = -state.lr * g / (np.sqrt(accum) + state.eps)
    return replace(
        state,
        params=DistortionParams.from_array(state.params.to_array() + state.basis @ dz),
        accum=accum,
        iteration=state.iteration + 1,
    )


def reconstruction_loss(rectified, gt, mask: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Summed squared error and its gradient ``2 (I_r - I_gt)`` (zero where masked out)."""
    rectified = as_image(rectified)
    gt = as_image(gt)
    if rectified.shape != gt.shape:
        raise GeometryError(f"rectified image {rectified.shape} and ground truth {gt.shape} differ in shape")
    diff = rectified - gt
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape[:2]:
            raise GeometryError(f"mask shape {mask.shape} does not match image {gt.shape[:2]}")
        diff = diff * mask[..., None]
    return float(np.sum(diff * diff)), 2.0 * diff


def interior_mask(grid: WarpGrid, margin: int) -> np.ndarray:
    """Pixels at least ``margin`` from the border whose source lies inside the fisheye raster."""
    mask = grid.in_bounds()
    if margin > 0:
        mask[:margin] = False
        mask[-margin:] = False
        mask[:, :margin] = False
        mask[:, -margin:] = False
    return mask


def _param_scale(geometry: Geometry) -> np.ndarray:
    return np.array([1.0] * 4 + [float(geometry.width)] * 4)


def warp_metric(params: DistortionParams, grid: WarpGrid, mask: np.ndarray) -> np.ndarray:
    """Mean over masked pixels of ``J^T J``, J the 2x8 Jacobian of ``(x_f, y_f)``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise GeometryError("no pixels left to build the warp metric")
    t = grid.theta[mask]
    dx = grid.dir_x[mask]
    dy = grid.dir_y[mask]
    r = grid.radius[mask]
    t2 = t * t
    powers = [t * t2]
    for _ in range(3):
        powers.append(powers[-1] * t2)
    zero = np.zeros_like(t)
    one = np.ones_like(t)
    jx = np.stack([params.mu * dx * p for p in powers] + [dx * r, zero, one, zero], axis=1)
    jy = np.stack([params.mv * dy * p for p in powers] + [zero, dy * r, zero, one], axis=1)
    return (jx.T @ jx + jy.T @ jy) / t.size


def whitening_basis(metric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Symmetric ``M^(-1/2)`` with eigenvalues floored at ``floor * max``."""
    w, v = np.linalg.eigh(metric)
    if not w[-1] > 0:
        raise ValueError("warp metric is not positive definite")
    w = np.maximum(w, floor * w[-1])
    return (v / np.sqrt(w)) @ v.T


def _basis(schedule: Schedule, params: DistortionParams, geometry: Geometry, fisheye_shape) -> np.ndarray:
    if schedule.precondition == "width":
        return np.diag(_param_scale(geometry))
    if schedule.precondition == "warp":
        grid = build_grid(params, geometry, fisheye_shape)
        return whitening_basis(warp_metric(params, grid, interior_mask(grid, schedule.margin)), schedule.eig_floor)
    raise ValueError(f"unknown preconditioner {schedule.precondition!r}; expected 'warp' or 'width'")


def estimate_params(
    fisheye,
    gt,
    init: DistortionParams,
    schedule: Schedule = Schedule(),
    geometry: Optional[Geometry] = None,
) -> tuple[DistortionParams, LossReport]:
    """Fit distortion parameters on one pyramid level; returns the best iterate."""
    fisheye = as_image(fisheye)
    gt = as_image(gt)
    if geometry is None:
        geometry = Geometry.for_size(gt.shape[1], gt.shape[0])
    if gt.shape[:2] != geometry.shape:
        raise GeometryError(f"ground truth is {gt.shape[1]}x{gt.shape[0]}, geometry {geometry.width}x{geometry.height}")
    if fisheye.shape[2] != gt.shape[2]:
        raise GeometryError("fisheye and ground truth differ in channel count")

    state = OptimizerState.initial(init, schedule.lr, schedule.eps, _basis(schedule, init, geometry, fisheye.shape[:2]))
    report = LossReport()
    for it in range(schedule.iters + 1):
        params = state.params
        grid = build_grid(params, geometry, fisheye.shape[:2])
        rec = rectify(fisheye, grid, schedule.fill)
        loss, upstream = reconstruction_loss(rec, gt, interior_mask(grid, schedule.margin))
        grads = backward(fisheye, grid, upstream, params, fill=schedule.fill).d_params
        if not (math.isfinite(loss) and np.isfinite(grads).all()):
            raise DivergenceError(f"non-finite loss or gradient at iteration {it}", report)
        report.trace.append(TraceEntry(it, loss, params, float(np.linalg.norm(state.basis.T @ grads))))
        if it == schedule.iters:
            break
        try:
            state = adagrad_step(state, grads)
        except ValueError as exc:
            raise DivergenceError(f"invalid parameters after iteration {it}: {exc}", report) from exc

    best = report.best.params
    report.monotonic = is_monotonic(best.k, geometry.theta_max)
    if not report.monotonic:
        log.warning("recovered radial polynomial is not monotonic over the field of view: k=%s", list(best.k))
    return best, report


def coarse_to_fine(
    fisheye,
    gt,
    init: DistortionParams,
    levels: Optional[int] = None,
    schedule: Schedule = Schedule(),
    geometry: Optional[Geometry] = None,
) -> tuple[DistortionParams, LossReport]:
    """Run :func:`estimate_params` over an image pyramid, coarsest level first.

    Between levels mu, mv scale by 2 and the principal point follows the
    half-pixel-aware coordinate law of :meth:`DistortionParams.rescaled`.
    Returns the finest-level params and report.
    """
    levels = schedule.levels if levels is None else levels
    if levels < 1:
        raise ValueError("levels must be >= 1")
    fisheye = as_image(fisheye)
    gt = as_image(gt)
    if geometry is None:
        geometry = Geometry.for_size(gt.shape[1], gt.shape[0])

    fish_pyr, gt_pyr, geo_pyr = [fisheye], [gt], [geometry]
    for _ in range(levels - 1):
        try:
            fish_pyr.append(downsample2(fish_pyr[-1]))
            gt_pyr.append(downsample2(gt_pyr[-1]))
            geo_pyr.append(geo_pyr[-1].halved())
        except (ValueError, GeometryError) as exc:
            raise ValueError(f"cannot build a {levels}-level pyramid: {exc}") from exc

    params = init.rescaled(0.5 ** (levels - 1))
    report = LossReport()
    for level in reversed(range(levels)):
        depth = levels - 1 - level
        level_schedule = replace(
            schedule,
            margin=math.ceil(schedule.margin / 2**level),
            lr=schedule.lr * schedule.level_decay**depth,
        )
        params, report = estimate_params(fish_pyr[level], gt_pyr[level], params, level_schedule, geo_pyr[level])
        log.info("level %d (%dx%d): loss %.6g", level, geo_pyr[level].width, geo_pyr[level].height, report.loss)
        if level:
            params = params.rescaled(2.0)
    return params, report


def default_init(geometry: Geometry) -> DistortionParams:
    """Mid-range starting point: no radial correction, mu = mv = 0.35 W, centered."""
    cx, cy = geometry.center
    return DistortionParams.equidistance(0.35 * geometry.width, cx, cy)
