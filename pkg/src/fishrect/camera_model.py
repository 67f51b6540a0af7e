"""General fisheye camera model.

A ray at angle ``theta`` from the optical axis lands at normalized radius

    r(theta) = theta + k1*theta**3 + k2*theta**5 + k3*theta**7 + k4*theta**9

and is then scaled to fisheye pixels by ``(mu, mv)`` and offset by the
principal point ``(u0, v0)``. Pinhole coordinates are normalized (focal
length 1), so ``theta = arctan(sqrt(x**2 + y**2))``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

PARAM_NAMES = ("k1", "k2", "k3", "k4", "mu", "mv", "u0", "v0")


def _reject_nan(*arrays) -> None:
    for a in arrays:
        if np.isnan(np.asarray(a, dtype=np.float64)).any():
            raise ValueError("NaN input rejected")


@dataclass(frozen=True)
class DistortionParams:
    """The 8-vector ``[k1, k2, k3, k4, mu, mv, u0, v0]``."""

    k: tuple[float, float, float, float]
    mu: float
    mv: float
    u0: float
    v0: float

    def __post_init__(self) -> None:
        k = tuple(float(v) for v in self.k)
        if len(k) != 4:
            raise ValueError(f"expected 4 radial coefficients, got {len(k)}")
        object.__setattr__(self, "k", k)
        for name in ("mu", "mv", "u0", "v0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        values = np.array(self.to_array())
        if not np.isfinite(values).all():
            raise ValueError(f"non-finite distortion parameters: {values.tolist()}")
        if self.mu <= 0 or self.mv <= 0:
            raise ValueError(f"mu and mv must be positive, got mu={self.mu}, mv={self.mv}")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "DistortionParams":
        values = [float(v) for v in values]
        if len(values) != 8:
            raise ValueError(
                f"distortion parameters must have 8 entries [k1,k2,k3,k4,mu,mv,u0,v0], got {len(values)}"
            )
        return cls(k=tuple(values[:4]), mu=values[4], mv=values[5], u0=values[6], v0=values[7])

    @classmethod
    def equidistance(cls, m: float, u0: float, v0: float) -> "DistortionParams":
        return cls(k=(0.0, 0.0, 0.0, 0.0), mu=m, mv=m, u0=u0, v0=v0)

    def to_array(self) -> np.ndarray:
        return np.array([*self.k, self.mu, self.mv, self.u0, self.v0], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.to_array()]

    def rescaled(self, factor: float) -> "DistortionParams":
        """Params for the same lens on an image resampled by ``factor``.

        Pixel centers sit at integer coordinates, so a resample by ``factor``
        maps pixel coordinate ``p`` to ``factor * (p + 0.5) - 0.5``. The
        radial coefficients act on angles and do not change.
        """
        return DistortionParams(
            k=self.k,
            mu=self.mu * factor,
            mv=self.mv * factor,
            u0=factor * (self.u0 + 0.5) - 0.5,
            v0=factor * (self.v0 + 0.5) - 0.5,
        )


class ProjectionKind(enum.Enum):
    STEREOGRAPHIC = "stereographic"
    EQUIDISTANCE = "equidistance"
    EQUISOLID = "equisolid"
    ORTHOGONAL = "orthogonal"


def radial_distance(theta, k: Sequence[float]):
    """Evaluate ``r(theta)`` for scalar or array ``theta`` (radians)."""
    _reject_nan(theta, k)
    theta = np.asarray(theta, dtype=np.float64)
    k1, k2, k3, k4 = (float(v) for v in k)
    t2 = theta * theta
    # Horner in theta**2
    r = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    return r if r.ndim else float(r)


def radial_derivative(theta, k: Sequence[float]):
    """d r / d theta."""
    theta = np.asarray(theta, dtype=np.float64)
    k1, k2, k3, k4 = (float(v) for v in k)
    t2 = theta * theta
    d = 1.0 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))
    return d if d.ndim else float(d)


def is_monotonic(k: Sequence[float], theta_max: float) -> bool:
    """True if ``r`` is strictly increasing on ``[0, theta_max]``.

    ``r'`` is a quartic in ``s = theta**2`` with value 1 at ``s = 0``, so
    ``r`` is strictly increasing exactly when that quartic has no real root
    in ``[0, theta_max**2]``.
    """
    k1, k2, k3, k4 = (float(v) for v in k)
    s_max = float(theta_max) ** 2
    coeffs = np.trim_zeros([9 * k4, 7 * k3, 5 * k2, 3 * k1, 1.0], "f")
    if len(coeffs) > 1:
        roots = np.roots(coeffs)
        real = roots[np.abs(roots.imag) <= 1e-12 * np.maximum(1.0, np.abs(roots))].real
        if np.any((real >= 0.0) & (real <= s_max)):
            return False
    # guards against roots lost to the imaginary-part tolerance
    ts = np.linspace(0.0, theta_max, 513)
    return bool(np.all(radial_derivative(ts, k) > 0.0))


def pinhole_to_fisheye(x, y, params: DistortionParams):
    """Map normalized pinhole coordinates to fisheye pixel coordinates.

    Works on scalars or broadcastable arrays. The origin maps to the
    principal point ``(u0, v0)``.
    """
    _reject_nan(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho = np.hypot(x, y)
    theta = np.arctan(rho)
    r = radial_distance(theta, params.k)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0.0, r / rho, 0.0)
    xf = params.u0 + params.mu * x * scale
    yf = params.v0 + params.mv * y * scale
    if xf.ndim == 0:
        return float(xf), float(yf)
    return xf, yf


def reference_projection(theta, kind: ProjectionKind, f: float = 1.0):
    """Ideal radial distance for one of the classical fisheye projections."""
    _reject_nan(theta)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0.0) or np.any(theta > np.pi / 2):
        raise ValueError("theta must lie in [0, pi/2]")
    kind = ProjectionKind(kind)
    if kind is ProjectionKind.STEREOGRAPHIC:
        r = 2.0 * f * np.tan(theta / 2.0)
    elif kind is ProjectionKind.EQUIDISTANCE:
        r = f * theta
    elif kind is ProjectionKind.EQUISOLID:
        r = 2.0 * f * np.sin(theta / 2.0)
    else:
        r = f * np.sin(theta)
    return r if r.ndim else float(r)


class ProjectionFit(NamedTuple):
    k: np.ndarray
    max_residual: float


def fit_projection(
    kind: ProjectionKind, f: float = 1.0, theta_max: float = 1.2, n_samples: int = 200
) -> ProjectionFit:
    """Least-squares fit of the radial polynomial to a reference projection.

    The focal length only rescales the curve (it is absorbed into mu, mv), so
    the fit targets ``reference / f``. Residuals are in the same normalized
    units.
    """
    if not 0.0 < theta_max <= np.pi / 2:
        raise ValueError(f"theta_max must be in (0, pi/2], got {theta_max}")
    if n_samples < 50:
        raise ValueError("need at least 50 sample angles")
    theta = np.linspace(0.0, theta_max, n_samples)
    target = reference_projection(theta, kind, f) / f - theta
    basis = np.stack([theta**3, theta**5, theta**7, theta**9], axis=1)
    gram = basis.T @ basis
    if np.linalg.cond(gram) > 1e15:
        raise ValueError(f"singular normal equations for theta_max={theta_max}")
    k = np.linalg.solve(gram, basis.T @ target)
    residual = np.abs(basis @ k - target)
    return ProjectionFit(k=k, max_residual=float(residual.max()))
