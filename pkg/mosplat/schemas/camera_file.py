from typing import List

from pydantic import BaseModel, Field, field_validator


class CameraFile(BaseModel):
    """On-disk camera record: shared intrinsics + per-frame world_to_cam."""
    fx: float = Field(..., gt=0, description="Focal length along x (pixels)")
    fy: float = Field(..., gt=0, description="Focal length along y (pixels)")
    cx: float = Field(..., description="Principal point x (pixels)")
    cy: float = Field(..., description="Principal point y (pixels)")
    width: int = Field(..., gt=0, description="Image width (pixels)")
    height: int = Field(..., gt=0, description="Image height (pixels)")
    world_to_cam: List[List[float]] = Field(..., description="Row-major 4x4 matrix per frame")

    @field_validator("world_to_cam")
    @classmethod
    def check_matrices(cls, value: List[List[float]]) -> List[List[float]]:
        for i, m in enumerate(value):
            if len(m) != 16:
                raise ValueError(f"world_to_cam[{i}] must have 16 entries, got {len(m)}")
        return value
