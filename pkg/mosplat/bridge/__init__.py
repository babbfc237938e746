"""
Object-centric <-> frame-centric coordinate bridge.
"""
from .transforms import (
    CropCamera,
    FrameTransform,
    ObjectTrajectory,
    apply_depth_scaling,
    compute_warp,
    crop_object,
    depth_scale_factor,
    fit_bbox,
    frame_to_object,
    init_transforms,
    median_depth,
    object_to_frame,
    select_reference_object,
)

__all__ = [
    "CropCamera", "FrameTransform", "ObjectTrajectory", "apply_depth_scaling", "compute_warp",
    "crop_object", "depth_scale_factor", "fit_bbox", "frame_to_object", "init_transforms",
    "median_depth", "object_to_frame", "select_reference_object",
]
