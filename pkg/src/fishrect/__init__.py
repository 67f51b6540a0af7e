"""Fisheye camera model, differentiable rectification layer, dataset synthesis
and distortion parameter recovery."""

from .camera_model import (
    PARAM_NAMES,
    DistortionParams,
    ProjectionKind,
    fit_projection,
    is_monotonic,
    pinhole_to_fisheye,
    radial_distance,
    reference_projection,
)
from .estimator import Schedule, coarse_to_fine, estimate_params, reconstruction_loss
from .image_core import LabelMap, load_image, save_image
from .metrics import psnr, ssim
from .rect_layer import Geometry, backward, build_grid, rectify, rectify_labels
from .synthesizer import ParamRanges, distort, generate_dataset, invert_radial

__all__ = [
    "PARAM_NAMES",
    "DistortionParams",
    "Geometry",
    "LabelMap",
    "ParamRanges",
    "ProjectionKind",
    "Schedule",
    "backward",
    "build_grid",
    "coarse_to_fine",
    "distort",
    "estimate_params",
    "fit_projection",
    "generate_dataset",
    "invert_radial",
    "is_monotonic",
    "load_image",
    "pinhole_to_fisheye",
    "psnr",
    "radial_distance",
    "rectify",
    "rectify_labels",
    "reconstruction_loss",
    "reference_projection",
    "save_image",
    "ssim",
]

__version__ = "0.1.0"
