from typing import Dict, Optional

from pydantic import BaseModel, Field


class TrackMetrics(BaseModel):
    """Trajectory and endpoint errors in 256x256-normalized pixels."""
    ate: float = Field(..., ge=0, description="Mean L2 over all points and timesteps")
    mte: float = Field(..., ge=0, description="Median L2 over all points and timesteps")
    a_epe: float = Field(..., ge=0, description="Mean L2 at the final timestep")
    m_epe: float = Field(..., ge=0, description="Median L2 at the final timestep")
    num_tracks: int = Field(..., ge=0)
    include_occluded: bool = Field(False, description="Whether GT-invisible samples were counted")


class TrackStatistics(BaseModel):
    avg_points_per_video: float = Field(..., ge=0)
    occlusion_rate_trajectory: float = Field(..., ge=0, le=1, description="Mean per-track invisible fraction")
    occlusion_rate_video: float = Field(..., ge=0, le=1, description="Invisible fraction of all samples")
    avg_motion: float = Field(..., ge=0, description="Mean inter-frame displacement of visible pairs (pixels)")
    num_videos: int = Field(..., ge=0)


class RunMetrics(BaseModel):
    """Contents of ``metrics.json`` in a run directory."""
    tracks: Optional[TrackMetrics] = None
    psnr: Optional[float] = Field(None, description="Mean reference-view PSNR (dB)")
    novel_psnr: Optional[float] = Field(None, description="Mean novel-view PSNR against ground truth (dB)")
    extra: Dict[str, float] = Field(default_factory=dict)
