"""Contact-front prediction for liquid drops: geometry, data preparation,
height-field reconstruction and neural simulation."""

from ._core import (
    CONTROL_POINTS,
    DENSE_SAMPLES,
    Contour,
    Error,
    Simulation,
    canonicalize,
    extract_frame,
    find_split_pair,
    fit_spline,
    incline_scale,
    layer_inventory,
    merge_contours,
    near_miss_undersample,
    otsu_threshold,
    reconstruct,
    save_initial_model,
    synth_clip,
)

__all__ = [
    "CONTROL_POINTS",
    "DENSE_SAMPLES",
    "Contour",
    "Error",
    "Simulation",
    "canonicalize",
    "extract_frame",
    "find_split_pair",
    "fit_spline",
    "incline_scale",
    "layer_inventory",
    "merge_contours",
    "near_miss_undersample",
    "otsu_threshold",
    "reconstruct",
    "save_initial_model",
    "synth_clip",
]
