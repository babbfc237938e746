"""
Scene data model and deformation field.
"""
from .camera import Camera, CameraPath, focal_from_fov, look_at
from .checkpoint import Section, load_checkpoint, load_checkpoint_with_sections, save_checkpoint
from .deformer import (
    DeformationField,
    DeformationVector,
    FactoredGrid,
    HeadSet,
    MotionBasisBank,
    apply_deformation,
    deform,
    query_features,
    sh_adjust_l1,
)
from .gaussians import GaussianSet, recenter_median
from .geometry import build_covariance, evaluate_sh, project_gaussian, project_gaussians

__all__ = [
    "Camera", "CameraPath", "focal_from_fov", "look_at",
    "Section", "load_checkpoint", "load_checkpoint_with_sections", "save_checkpoint",
    "DeformationField", "DeformationVector", "FactoredGrid", "HeadSet", "MotionBasisBank",
    "apply_deformation", "deform", "query_features", "sh_adjust_l1",
    "GaussianSet", "recenter_median",
    "build_covariance", "evaluate_sh", "project_gaussian", "project_gaussians",
]
