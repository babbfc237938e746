"""
Orbit cameras and the fixed novel-view protocol.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from ..config import RasterSettings
from ..core.diffcore import DTYPE
from ..models.camera import Camera
from ..models.gaussians import GaussianSet, recenter_median
from .rasterizer import RenderOutput, render

# (elevation, azimuth) in degrees
PROTOCOL_ANGLES: List[Tuple[float, float]] = [(0.0, 30.0), (0.0, -30.0), (30.0, 0.0), (-30.0, 0.0)]


def orbit_camera(base: Camera, elevation: float, azimuth: float,
                 center: Optional[Sequence[float]] = None) -> Camera:
    """
    Rigidly orbit ``base`` about ``center`` (default: world origin).

    Azimuth turns about the base camera's vertical axis, elevation about its
    horizontal axis; the distance to the pivot is preserved.
    """
    pivot = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    R = base.rotation.numpy()
    right, down = R[0], R[1]
    turn = Rotation.from_rotvec(np.radians(azimuth) * down) * Rotation.from_rotvec(np.radians(elevation) * right)
    M = turn.as_matrix()

    eye = base.center.numpy()
    new_eye = pivot + M @ (eye - pivot)
    new_R = R @ M.T
    pose = np.eye(4)
    pose[:3, :3] = new_R
    pose[:3, 3] = -new_R @ new_eye
    return base.with_pose(torch.tensor(pose, dtype=DTYPE))


def render_novel_view_set(gaussians: GaussianSet, base_cam: Camera,
                          angles: Sequence[Tuple[float, float]] = PROTOCOL_ANGLES,
                          num_classes: Optional[int] = None,
                          settings: Optional[RasterSettings] = None) -> List[RenderOutput]:
    """Recenter on the median and render one orbit view per (elevation, azimuth)."""
    centered = recenter_median(gaussians)
    return [render(centered, orbit_camera(base_cam, el, az), num_classes=num_classes, settings=settings)
            for el, az in angles]


def recentered_camera(cam: Camera, pivot: torch.Tensor) -> Camera:
    """``cam`` expressed in a world shifted by ``-pivot`` (same view of the shifted scene)."""
    pose = cam.world_to_cam.clone()
    pose[:3, 3] = cam.translation + cam.rotation @ torch.as_tensor(pivot, dtype=DTYPE)
    return cam.with_pose(pose)
