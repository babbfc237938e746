"""
Pinhole cameras and per-frame camera paths.
"""
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Union

import numpy as np
import torch
from loguru import logger

from ..core.diffcore import DTYPE
from ..core.errors import MosplatError
from ..schemas.camera_file import CameraFile

ORTHONORMAL_TOL = 1e-8


@dataclass
class Camera:
    """Pinhole camera for a single frame. Pixel (i, j) is centered at (x=j, y=i)."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: torch.Tensor = field(default_factory=lambda: torch.eye(4, dtype=DTYPE))

    def __post_init__(self):
        self.world_to_cam = torch.as_tensor(self.world_to_cam, dtype=DTYPE)
        if self.fx <= 0 or self.fy <= 0:
            raise MosplatError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        R = self.rotation
        err = float(torch.linalg.norm(R.T @ R - torch.eye(3, dtype=DTYPE)))
        if err > ORTHONORMAL_TOL:
            raise MosplatError(f"world_to_cam rotation is not orthonormal (|R^T R - I| = {err:.3e})")

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> torch.Tensor:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> torch.Tensor:
        inv = torch.eye(4, dtype=DTYPE)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = self.center
        return inv

    @property
    def intrinsics(self) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=DTYPE)

    def with_pose(self, world_to_cam: torch.Tensor) -> "Camera":
        return replace(self, world_to_cam=torch.as_tensor(world_to_cam, dtype=DTYPE))

    def with_size(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)

    def to_camera(self, points: torch.Tensor) -> torch.Tensor:
        """World points (N, 3) into camera coordinates."""
        return points @ self.rotation.T + self.translation

    def to_world(self, points: torch.Tensor) -> torch.Tensor:
        """Camera-coordinate points (N, 3) into world coordinates."""
        return (points - self.translation) @ self.rotation

    def project(self, points_cam: torch.Tensor) -> torch.Tensor:
        """Pixel coordinates of camera-space points (no culling)."""
        z = points_cam[..., 2]
        u = self.fx * points_cam[..., 0] / z + self.cx
        v = self.fy * points_cam[..., 1] / z + self.cy
        return torch.stack([u, v], dim=-1)

    def unproject(self, pixels: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """Camera-space points of pixels (N, 2) at z-depth (N,)."""
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        return torch.stack([x, y, depth], dim=-1)


@dataclass
class CameraPath:
    """Shared intrinsics plus one world_to_cam pose per frame."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    poses: List[torch.Tensor]

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def camera(self, t: int) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.poses[t])

    def __getitem__(self, t: int) -> Camera:
        return self.camera(t)

    @classmethod
    def static(cls, camera: Camera, num_frames: int) -> "CameraPath":
        return cls(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
                   [camera.world_to_cam.clone() for _ in range(num_frames)])

    def save(self, path: Union[str, Path]):
        record = CameraFile(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height,
            world_to_cam=[p.reshape(-1).tolist() for p in self.poses],
        )
        Path(path).write_text(record.model_dump_json(indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CameraPath":
        record = CameraFile.model_validate(json.loads(Path(path).read_text()))
        poses = [torch.tensor(m, dtype=DTYPE).reshape(4, 4) for m in record.world_to_cam]
        logger.debug(f"Loaded {len(poses)} camera poses from {path}")
        return cls(record.fx, record.fy, record.cx, record.cy, record.width, record.height, poses)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> torch.Tensor:
    """
    world_to_cam matrix of a camera at ``eye`` looking at ``target``.

    Camera axes follow the image convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return torch.tensor(M, dtype=DTYPE)


def focal_from_fov(size: int, fov_deg: float) -> float:
    return size / (2.0 * math.tan(math.radians(fov_deg) / 2.0))


