"""
Two-stage optimization: initialization, static lifting, dynamic fitting and tracking.
"""
from .dynamic_fit import DynamicFitResult, DynamicFitter, VideoTargets, dynamic_fit, render_frame
from .initialization import fit_background, init_background, init_object_gaussians
from .maintenance import MaintenanceReport, prune_and_densify
from .run_dir import FittedModel, RunDir
from .stages import fit_scene, lift_scene, open_priors
from .static_lift import StaticLiftResult, static_lift
from .tracking import TrackQuery, extract_tracks, sample_queries

__all__ = [
    "DynamicFitResult", "DynamicFitter", "VideoTargets", "dynamic_fit", "render_frame",
    "fit_background", "init_background", "init_object_gaussians",
    "MaintenanceReport", "prune_and_densify", "FittedModel", "RunDir",
    "fit_scene", "lift_scene", "open_priors", "StaticLiftResult", "static_lift",
    "TrackQuery", "extract_tracks", "sample_queries",
]
