"""Synthetic fisheye dataset generation.

Fisheye renderings are produced by inverse warping: every fisheye pixel is
traced back to the perspective source through the inverse of the radial
polynomial, so the output has no holes.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .camera_model import DistortionParams, is_monotonic, radial_derivative, radial_distance
from .image_core import (
    FILL_ZERO,
    LabelMap,
    as_image,
    in_bounds,
    load_image,
    load_labels,
    quantize,
    sample_bilinear,
    sample_nearest,
    save_image,
    save_labels,
)
from .rect_layer import DEFAULT_FOCAL_RATIO, Geometry

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
_THETA_LIMIT = float(np.nextafter(np.pi / 2, 0.0))


class NonMonotonicError(ValueError):
    pass


class InversionError(RuntimeError):
    pass


def invert_radial(r_target, params, theta_max: float = _THETA_LIMIT, tol: float = 1e-10, max_iter: int = 100):
    """Solve ``r(theta) = r_target`` on ``[0, theta_max]``.

    Safeguarded Newton starting from ``theta = r_target``; a step leaving the
    current bracket is replaced by bisection. ``params`` may be a
    :class:`DistortionParams` or the four radial coefficients, and ``r`` must be
    strictly increasing on ``[0, theta_max]``. Targets beyond ``r(theta_max)``
    are out of the field of view and come back as NaN.
    """
    k = params.k if isinstance(params, DistortionParams) else tuple(params)
    target = np.asarray(r_target, dtype=np.float64)
    if np.isnan(target).any():
        raise ValueError("NaN radius rejected")
    if np.any(target < 0):
        raise ValueError("radius must be non-negative")
    scalar = target.ndim == 0
    target = np.atleast_1d(target)

    r_max = radial_distance(theta_max, k)
    inside = target <= r_max
    t = np.where(inside, target, 0.0)
    lo = np.zeros_like(t)
    hi = np.full_like(t, theta_max)
    theta = np.clip(t, 0.0, theta_max)
    scale = np.maximum(1.0, t)
    for _ in range(max_iter):
        f = radial_distance(theta, k) - t
        done = np.abs(f) <= 1e-15 * scale
        if done.all():
            break
        hi = np.where(f > 0, theta, hi)
        lo = np.where(f < 0, theta, lo)
        d = radial_derivative(theta, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d > 0, theta - f / d, np.nan)
        bad = ~((step > lo) & (step < hi))
        new = np.where(bad, 0.5 * (lo + hi), step)
        stalled = new == theta
        theta = np.where(done, theta, new)
        if np.all(done | stalled):
            break

    resid = np.abs(radial_distance(theta, k) - t)
    failed = inside & (resid >= tol)
    if failed.any():
        worst = float(target[failed][np.argmax(resid[failed])])
        raise InversionError(f"radial inversion did not converge for radius {worst!r}")
    theta = np.where(inside, theta, np.nan)
    return float(theta[0]) if scalar else theta


def synthesis_map(params: DistortionParams, geometry: Geometry, fisheye_shape: Optional[tuple[int, int]] = None):
    """Source-pixel coordinates for every fisheye pixel.

    Returns ``(sx, sy, valid)`` where ``valid`` marks fisheye pixels whose ray
    is inside the field of view and lands inside the source raster.
    """
    if not is_monotonic(params.k, geometry.theta_max):
        raise NonMonotonicError(
            f"radial polynomial k={list(params.k)} is not strictly increasing on [0, {geometry.theta_max:.4f}]"
        )
    h, w = fisheye_shape if fisheye_shape is not None else geometry.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    xp = (u - params.u0) / params.mu
    yp = (v - params.v0) / params.mv
    rho_f = np.hypot(xp, yp)
    theta = invert_radial(rho_f, params.k, geometry.theta_max)
    in_field = ~np.isnan(theta)
    tan_t = np.tan(np.where(in_field, theta, 0.0))
    safe = np.where(rho_f > 0, rho_f, 1.0)
    x = np.where(rho_f > 0, tan_t * xp / safe, 0.0)
    y = np.where(rho_f > 0, tan_t * yp / safe, 0.0)
    sx, sy = geometry.to_pixels(x, y)
    valid = in_field & in_bounds(sx, sy, geometry.height, geometry.width)
    # park invalid points far outside so samplers return fill values
    sx = np.where(in_field, sx, -10.0)
    sy = np.where(in_field, sy, -10.0)
    return sx, sy, valid


def distort(src, params: DistortionParams, geometry: Optional[Geometry] = None, fisheye_shape=None) -> np.ndarray:
    """Render the fisheye view of a perspective image.

    ``geometry`` describes ``src`` as a pinhole raster (default: its own size
    with the default focal length). Pixels whose preimage is outside ``src``
    or outside the field of view are black.
    """
    src = as_image(src)
    if geometry is None:
        geometry = Geometry.for_size(src.shape[1], src.shape[0])
    if src.shape[:2] != geometry.shape:
        raise ValueError(f"source is {src.shape[1]}x{src.shape[0]} but geometry is {geometry.width}x{geometry.height}")
    sx, sy, valid = synthesis_map(params, geometry, fisheye_shape)
    out = sample_bilinear(src, sx, sy, FILL_ZERO)
    return out * valid[..., None]


def distort_labels(lbl: LabelMap, params: DistortionParams, geometry: Optional[Geometry] = None, fisheye_shape=None) -> LabelMap:
    if geometry is None:
        geometry = Geometry.for_size(lbl.width, lbl.height)
    if lbl.data.shape != geometry.shape:
        raise ValueError(f"label map is {lbl.width}x{lbl.height} but geometry is {geometry.width}x{geometry.height}")
    sx, sy, _ = synthesis_map(params, geometry, fisheye_shape)
    return LabelMap(sample_nearest(lbl, sx, sy), lbl.ignore_label)


@dataclass
class ParamRanges:
    """Closed sampling intervals.

    Pixel-unit parameters are relative to the raster: ``mu``/``mv`` as a
    fraction of the width, ``u0``/``v0`` as an offset from the raster center in
    fractions of width/height.
    """

    k1: tuple[float, float] = (-0.4, 0.4)
    k2: tuple[float, float] = (-0.2, 0.2)
    k3: tuple[float, float] = (-0.1, 0.1)
    k4: tuple[float, float] = (-0.05, 0.05)
    mu: tuple[float, float] = (0.25, 0.45)
    mv: tuple[float, float] = (0.25, 0.45)
    u0: tuple[float, float] = (-0.05, 0.05)
    v0: tuple[float, float] = (-0.05, 0.05)
    samples_per_source: int = 10

    _FIELDS = ("k1", "k2", "k3", "k4", "mu", "mv", "u0", "v0")

    def __post_init__(self) -> None:
        for name in self._FIELDS:
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo <= hi:
                raise ValueError(f"range for {name} has lower bound {lo} above upper bound {hi}")
            setattr(self, name, (lo, hi))
        if self.mu[0] <= 0 or self.mv[0] <= 0:
            raise ValueError("mu and mv ranges must be positive")
        if self.samples_per_source < 1:
            raise ValueError("samples_per_source must be at least 1")

    def to_dict(self) -> dict:
        d = {name: list(getattr(self, name)) for name in self._FIELDS}
        d["samples_per_source"] = self.samples_per_source
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamRanges":
        unknown = set(d) - set(cls._FIELDS) - {"samples_per_source"}
        if unknown:
            raise ValueError(f"unknown parameter range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if k != "samples_per_source" else int(v) for k, v in d.items()})

    def sample(self, rng: np.random.Generator, geometry: Geometry, max_retries: int = 100) -> DistortionParams:
        """Uniform independent draw, redrawn until the polynomial is monotonic."""
        w, h = geometry.width, geometry.height
        cx, cy = geometry.center
        for _ in range(max_retries + 1):
            v = [rng.uniform(*getattr(self, name)) for name in self._FIELDS]
            k = v[:4]
            if is_monotonic(k, geometry.theta_max):
                return DistortionParams(k=k, mu=v[4] * w, mv=v[5] * w, u0=cx + v[6] * w, v0=cy + v[7] * h)
        raise NonMonotonicError(f"no monotonic draw in {max_retries} retries; narrow the k ranges")


@dataclass
class SampleRecord:
    id: str
    source: str
    fisheye: str
    ground_truth: str
    fisheye_labels: Optional[str]
    ground_truth_labels: Optional[str]
    params: DistortionParams
    seed: int
    geometry: Geometry

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "fisheye": self.fisheye,
            "ground_truth": self.ground_truth,
            "fisheye_labels": self.fisheye_labels,
            "ground_truth_labels": self.ground_truth_labels,
            "params": self.params.to_list(),
            "seed": self.seed,
            "geometry": self.geometry.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        g = d["geometry"]
        return cls(
            id=d["id"],
            source=d["source"],
            fisheye=d["fisheye"],
            ground_truth=d["ground_truth"],
            fisheye_labels=d.get("fisheye_labels"),
            ground_truth_labels=d.get("ground_truth_labels"),
            params=DistortionParams.from_array(d["params"]),
            seed=int(d["seed"]),
            geometry=Geometry(int(g["width"]), int(g["height"]), float(g["focal"])),
        )


@dataclass
class DatasetManifest:
    seed: int
    ranges: ParamRanges
    records: list[SampleRecord] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    # directory that relative record paths resolve against; not serialized
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "ranges": self.ranges.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('version')!r}")
        return cls(
            seed=int(d["seed"]),
            ranges=ParamRanges.from_dict(d["ranges"]),
            records=[SampleRecord.from_dict(r) for r in d["records"]],
            skipped=list(d.get("skipped", [])),
            version=d["version"],
            root=path.parent,
        )


def record_seed(seed: int, source_index: int, sample_index: int) -> int:
    """Per-record RNG seed, independent of generation order."""
    ss = np.random.SeedSequence([int(seed), int(source_index), int(sample_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _square_resize(arr: np.ndarray, size: int, resample) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = arr[top : top + side, left : left + side]
    if side == size:
        return crop
    im = Image.fromarray(crop)
    return np.asarray(im.resize((size, size), resample=resample))


def prepare_source(
    image: np.ndarray, labels: Optional[LabelMap], size: Optional[int]
) -> tuple[np.ndarray, Optional[LabelMap]]:
    """Center-crop to square and resize to ``size`` (no-op when ``size`` is None)."""
    if size is None:
        return image, labels
    q = quantize(image)
    q = q[:, :, 0] if q.shape[2] == 1 else q
    img = _square_resize(q, size, Image.Resampling.BILINEAR).astype(np.float64) / 255.0
    out_labels = None
    if labels is not None:
        if labels.data.shape != image.shape[:2]:
            raise ValueError("label map and image sizes differ")
        lab = _square_resize(labels.data.astype(np.uint8), size, Image.Resampling.NEAREST)
        out_labels = LabelMap(lab.astype(np.int64), labels.ignore_label)
    return as_image(img), out_labels


SourceSpec = Union[str, os.PathLike, tuple]


def _split_source(spec: SourceSpec) -> tuple[Path, Optional[Path]]:
    if isinstance(spec, tuple):
        img, lbl = spec
        return Path(img), (Path(lbl) if lbl is not None else None)
    return Path(spec), None


def generate_dataset(
    sources: Sequence[SourceSpec],
    ranges: ParamRanges,
    seed: int,
    out_dir: Union[str, os.PathLike],
    size: Optional[int] = 256,
    focal_ratio: float = DEFAULT_FOCAL_RATIO,
    workers: int = 1,
) -> DatasetManifest:
    """Render ``ranges.samples_per_source`` fisheye samples per source.

    Writes ``fisheye/``, ``gt/`` (and ``fisheye_labels/``, ``gt_labels/`` when
    sources carry labels) plus ``manifest.json`` under ``out_dir``. Record
    paths in the manifest are relative to ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dirs = {name: out / name for name in ("fisheye", "gt", "fisheye_labels", "gt_labels")}
    for name in ("fisheye", "gt"):
        dirs[name].mkdir(exist_ok=True)

    manifest = DatasetManifest(seed=int(seed), ranges=ranges, root=out)
    jobs = []
    for i, spec in enumerate(sources):
        img_path, lbl_path = _split_source(spec)
        try:
            image = load_image(img_path)
            labels = load_labels(lbl_path) if lbl_path is not None else None
            image, labels = prepare_source(image, labels, size)
        except (OSError, ValueError) as exc:
            log.warning("skipping source %s: %s", img_path, exc)
            manifest.skipped.append({"source": str(img_path), "error": str(exc)})
            continue
        geometry = Geometry.for_size(image.shape[1], image.shape[0], focal_ratio * image.shape[1])
        if labels is not None:
            dirs["fisheye_labels"].mkdir(exist_ok=True)
            dirs["gt_labels"].mkdir(exist_ok=True)
        for j in range(ranges.samples_per_source):
            jobs.append((i, j, img_path, lbl_path, image, labels, geometry))

    def render(job) -> SampleRecord:
        i, j, img_path, lbl_path, image, labels, geometry = job
        sid = f"{i:04d}-{img_path.stem}-{j:02d}"
        rseed = record_seed(seed, i, j)
        params = ranges.sample(np.random.default_rng(rseed), geometry)
        fish = distort(image, params, geometry)
        rec = SampleRecord(
            id=sid,
            source=str(img_path),
            fisheye=f"fisheye/{sid}.png",
            ground_truth=f"gt/{sid}.png",
            fisheye_labels=None,
            ground_truth_labels=None,
            params=params,
            seed=rseed,
            geometry=geometry,
        )
        save_image(fish, out / rec.fisheye)
        save_image(image, out / rec.ground_truth)
        if labels is not None:
            rec.fisheye_labels = f"fisheye_labels/{sid}.pgm"
            rec.ground_truth_labels = f"gt_labels/{sid}.pgm"
            save_labels(distort_labels(labels, params, geometry), out / rec.fisheye_labels)
            save_labels(labels, out / rec.ground_truth_labels)
        return rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            manifest.records = list(pool.map(render, jobs))
    else:
        manifest.records = [render(job) for job in jobs]

    manifest.save(out / MANIFEST_NAME)
    log.info("wrote %d samples (%d sources skipped) to %s", len(manifest.records), len(manifest.skipped), out)
    return manifest
