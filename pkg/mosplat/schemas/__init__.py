from .camera_file import CameraFile
from .run_metrics import RunMetrics, TrackMetrics, TrackStatistics
from .scene_spec import ObjectSpec, SceneSpec, TrajectorySpec

__all__ = [
    "CameraFile", "RunMetrics", "TrackMetrics", "TrackStatistics",
    "ObjectSpec", "SceneSpec", "TrajectorySpec",
]
