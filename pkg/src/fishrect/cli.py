"""Command-line interface: ``fishrect <subcommand> [options]``.

Options may also come from a JSON file given with ``--config``; explicit
flags override it. ``FISHRECT_THREADS`` sets the worker count for
synthesize/evaluate.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .camera_model import PARAM_NAMES, DistortionParams
from .estimator import DivergenceError, Schedule, coarse_to_fine, default_init
from .image_core import FILL_MODES, load_image, load_labels, save_image, save_labels
from .metrics import evaluate_manifest
from .patterns import smooth_image
from .rect_layer import DEFAULT_FOCAL_RATIO, Geometry, build_grid, gradient_check, rectify, rectify_labels
from .synthesizer import DatasetManifest, NonMonotonicError, ParamRanges, distort, distort_labels, generate_dataset

log = logging.getLogger("fishrect")

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".jpg", ".jpeg")


class CliError(Exception):
    pass


def load_params(path) -> DistortionParams:
    """Read an 8-array ``[k1,k2,k3,k4,mu,mv,u0,v0]`` or an object with a ``params`` key."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"{path}: cannot read params file ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON ({exc})") from exc
    if isinstance(data, dict):
        data = data.get("params")
    schema = "params must be a JSON array of 8 numbers [k1,k2,k3,k4,mu,mv,u0,v0]"
    if not isinstance(data, list) or len(data) != 8 or not all(isinstance(v, (int, float)) for v in data):
        raise CliError(f"{path}: {schema}")
    try:
        return DistortionParams.from_array(data)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc


def save_params(params: DistortionParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_list()) + "\n")


def _threads() -> int:
    raw = os.environ.get("FISHRECT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"FISHRECT_THREADS must be an integer, got {raw!r}")


def _seed(args) -> int:
    if getattr(args, "entropy", False):
        seed = secrets.randbits(32)
        print(f"seed: {seed}")
        return seed
    return args.seed


def _geometry(args, width: int, height: int) -> Geometry:
    focal = args.focal if args.focal is not None else DEFAULT_FOCAL_RATIO * width
    return Geometry(width, height, focal)


# --- subcommands ----------------------------------------------------------


def _collect_sources(args) -> list:
    src = Path(args.sources)
    if not src.is_dir():
        raise CliError(f"{src}: source directory not found")
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_EXTS and p.is_file())
    if not images:
        raise CliError(f"{src}: no source images ({', '.join(IMAGE_EXTS)})")
    if args.labels is None:
        return images
    lbl_dir = Path(args.labels)
    if not lbl_dir.is_dir():
        raise CliError(f"{lbl_dir}: label directory not found")
    out = []
    for img in images:
        match = next((lbl_dir / f"{img.stem}{ext}" for ext in (".pgm", ".png") if (lbl_dir / f"{img.stem}{ext}").exists()), None)
        out.append((img, match))
    return out


def cmd_synthesize(args) -> int:
    sources = _collect_sources(args)
    ranges = ParamRanges()
    if args.ranges is not None:
        try:
            ranges = ParamRanges.from_dict(json.loads(Path(args.ranges).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise CliError(f"{args.ranges}: invalid parameter ranges ({exc})") from exc
    ranges.samples_per_source = args.per_source
    out = Path(args.out)
    manifest = generate_dataset(
        sources,
        ranges,
        _seed(args),
        out,
        size=args.size or None,
        focal_ratio=args.focal_ratio,
        workers=_threads(),
    )
    print(
        f"{len(manifest.records)} samples from {len(sources) - len(manifest.skipped)} sources "
        f"({len(manifest.skipped)} skipped) -> {out / 'manifest.json'}"
    )
    if not manifest.records:
        raise CliError("no samples were generated")
    return 0


def _load_image_arg(path) -> np.ndarray:
    try:
        return load_image(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def cmd_rectify(args) -> int:
    params = load_params(args.params)
    fish = _load_image_arg(args.image)
    h, w = fish.shape[:2]
    geometry = _geometry(args, args.width or w, args.height or h)
    grid = build_grid(params, geometry, (h, w))
    save_image(rectify(fish, grid, args.fill), args.out)
    if args.labels:
        if not args.labels_out:
            raise CliError("--labels requires --labels-out")
        save_labels(rectify_labels(load_labels(args.labels), grid), args.labels_out)
    print(f"wrote {args.out}")
    return 0


def cmd_distort(args) -> int:
    params = load_params(args.params)
    src = _load_image_arg(args.image)
    geometry = _geometry(args, src.shape[1], src.shape[0])
    try:
        save_image(distort(src, params, geometry), args.out)
        if args.labels:
            if not args.labels_out:
                raise CliError("--labels requires --labels-out")
            save_labels(distort_labels(load_labels(args.labels), params, geometry), args.labels_out)
    except NonMonotonicError as exc:
        raise CliError(str(exc)) from exc
    print(f"wrote {args.out}")
    return 0


def cmd_estimate(args) -> int:
    fish = _load_image_arg(args.fisheye)
    gt = _load_image_arg(args.gt)
    if fish.shape != gt.shape:
        raise CliError(f"fisheye {fish.shape[1]}x{fish.shape[0]}x{fish.shape[2]} and ground truth "
                       f"{gt.shape[1]}x{gt.shape[0]}x{gt.shape[2]} differ")
    geometry = _geometry(args, gt.shape[1], gt.shape[0])
    init = load_params(args.init) if args.init else default_init(geometry)
    schedule = Schedule(
        lr=args.lr, eps=args.eps, iters=args.iters, levels=args.levels, margin=args.margin,
        fill=args.fill, level_decay=args.level_decay, precondition=args.precondition,
    )
    try:
        params, report = coarse_to_fine(fish, gt, init, schedule=schedule, geometry=geometry)
    except DivergenceError as exc:
        if args.trace:
            exc.report.to_csv(args.trace)
        raise CliError(f"estimation diverged: {exc}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    save_params(params, args.out_params)
    if args.trace:
        report.to_csv(args.trace)
    if args.out_image:
        save_image(rectify(fish, build_grid(params, geometry, fish.shape[:2])), args.out_image)
    print(f"loss {report.loss:.6g} at iteration {report.best.iteration}")
    print("params " + " ".join(f"{n}={v:.6g}" for n, v in zip(PARAM_NAMES, params.to_list())))
    if not report.monotonic:
        print("warning: recovered radial polynomial is not monotonic over the field of view", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(_seed(args))
    if args.image:
        image = _load_image_arg(args.image)
    else:
        image = smooth_image(args.size, args.size, rng)
    h, w, c = image.shape
    geometry = _geometry(args, w, h)
    params = ParamRanges().sample(rng, geometry)
    target = smooth_image(h, w, rng, channels=c)
    result = gradient_check(image, params, target, geometry, fill=args.fill)
    analytic = result.analytic.copy()
    if args.break_param:
        analytic[PARAM_NAMES.index(args.break_param)] *= 1.1
    errors = result.relative_errors(analytic)
    ok = True
    for name, a, n, e in zip(PARAM_NAMES, analytic, result.numeric, errors):
        status = "ok" if e < args.threshold else "FAIL"
        ok &= e < args.threshold
        print(f"{name:>3}  analytic {a: .8e}  numeric {n: .8e}  rel.err {e:.3e}  {status}")
    print("gradient check " + ("passed" if ok else "FAILED") + f" (threshold {args.threshold:g})")
    return 0 if ok else 1


def cmd_evaluate(args) -> int:
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{args.manifest}: cannot read manifest ({exc})") from exc
    rectified = Path(args.rectified)
    if not rectified.is_dir():
        raise CliError(f"{rectified}: directory not found")
    report = evaluate_manifest(manifest, rectified, margin=args.interior_margin, workers=_threads())
    for sid in report.missing:
        print(f"missing: {sid}", file=sys.stderr)
    if report.count == 0:
        raise CliError("no rectified images found for any manifest record")
    if args.csv or args.json:
        report.write(args.csv or os.devnull, args.json or os.devnull)
    print(f"samples {report.count} (missing {len(report.missing)})  mean PSNR {report.mean_psnr:.4f} dB  mean SSIM {report.mean_ssim:.4f}")
    return 0


# --- parser ---------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option defaults (flags take precedence)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--entropy", action="store_true", help="draw a fresh random seed and print it")


def _add_focal(p: argparse.ArgumentParser) -> None:
    p.add_argument("--focal", type=float, default=None,
                   help=f"pinhole focal length of the rectified raster in pixels (default {DEFAULT_FOCAL_RATIO} x width)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fishrect", description="Fisheye rectification, synthesis and parameter recovery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="render a fisheye dataset from perspective images")
    p.add_argument("--sources", required=True, help="directory of source images")
    p.add_argument("--labels", help="directory of label maps named like the sources (.pgm/.png)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-source", type=int, default=10, help="samples per source image (default 10)")
    p.add_argument("--size", type=int, default=256, help="square output size; 0 keeps the source size (default 256)")
    p.add_argument("--focal-ratio", type=float, default=DEFAULT_FOCAL_RATIO, help="rectified focal length / width")
    p.add_argument("--ranges", help="JSON file with parameter ranges")
    _add_seed(p)
    _add_common(p)
    p.set_defaults(func=cmd_synthesize)

    for name, func, help_ in (
        ("rectify", cmd_rectify, "rectify a fisheye image with known params"),
        ("distort", cmd_distort, "render the fisheye view of a perspective image"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--image", required=True)
        p.add_argument("--params", required=True, help="JSON 8-array [k1,k2,k3,k4,mu,mv,u0,v0] or manifest record")
        p.add_argument("--out", required=True)
        p.add_argument("--labels", help="label map to warp alongside the image")
        p.add_argument("--labels-out", help="where to write the warped label map")
        _add_focal(p)
        if name == "rectify":
            p.add_argument("--width", type=int, default=None, help="output width (default: input width)")
            p.add_argument("--height", type=int, default=None, help="output height (default: input height)")
            p.add_argument("--fill", choices=FILL_MODES, default="zero", help="out-of-bounds policy")
        _add_common(p)
        p.set_defaults(func=func)

    d = Schedule()
    p = sub.add_parser("estimate", help="recover distortion params from a fisheye / ground-truth pair")
    p.add_argument("--fisheye", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-params", required=True)
    p.add_argument("--out-image", help="write the rectified image")
    p.add_argument("--trace", help="write the finest-level loss trace as CSV")
    p.add_argument("--init", help="initial params JSON (default: equidistance, mu=mv=0.35 W, centered)")
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--iters", type=int, default=d.iters, help="iterations per pyramid level")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--eps", type=float, default=d.eps)
    p.add_argument("--level-decay", type=float, default=d.level_decay, help="lr factor per finer level")
    p.add_argument("--margin", type=int, default=d.margin, help="border excluded from the loss (finest level pixels)")
    p.add_argument("--fill", choices=FILL_MODES, default=d.fill)
    p.add_argument("--precondition", choices=("warp", "width"), default=d.precondition,
                   help="optimizer coordinates: whitened warp metric or width-normalized params")
    _add_focal(p)
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--image", help="test image (default: generated smooth image)")
    p.add_argument("--size", type=int, default=64, help="generated image size (default 64)")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--fill", choices=FILL_MODES, default="clamp")
    p.add_argument("--break", dest="break_param", choices=PARAM_NAMES,
                   help="debug: corrupt one analytic component to exercise the checker")
    _add_focal(p)
    _add_seed(p)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of rectified images against a manifest's ground truth")
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")
    p.add_argument("--rectified", required=True, help="directory with <sample id>.png files")
    p.add_argument("--csv", help="per-sample CSV output")
    p.add_argument("--json", help="summary JSON output")
    p.add_argument("--interior-margin", type=int, default=0, help="crop this many pixels before scoring")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    path = _config_path(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    command = next((tok for tok in argv if tok in subparsers), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        config = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config {path}: {exc}")
    if not isinstance(config, dict):
        parser.error(f"--config {path}: expected a JSON object")
    subparser = subparsers[command]
    known = {a.dest for a in subparser._actions}
    config = {k.replace("-", "_"): v for k, v in config.items()}
    unknown = sorted(set(config) - known - {"config", "help"})
    if unknown:
        parser.error(f"--config {path}: unknown options {unknown}")
    # config values become defaults, so explicit flags still win
    subparser.set_defaults(**config)
    for action in subparser._actions:
        if action.dest in config:
            action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _apply_config(parser, argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
