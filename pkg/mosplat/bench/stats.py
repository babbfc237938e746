"""Track statistics over a collection of videos."""
from typing import Sequence

import numpy as np

from ..schemas.run_metrics import TrackStatistics
from .tracks import TrackSet


def track_stats(videos: Sequence[TrackSet]) -> TrackStatistics:
    """
    Occlusion and motion statistics over a collection of videos' tracks.

    Per-trajectory occlusion averages each track's invisible fraction; per-video
    occlusion averages each video's invisible fraction of (point, frame)
    samples; motion is the mean displacement between consecutive frames where
    both are visible.
    """
    per_track, per_video, steps = [], [], []
    for tracks in videos:
        if not len(tracks):
            continue
        visible = tracks.visibility()
        per_track.extend(1.0 - visible.mean(axis=1))
        per_video.append(1.0 - visible.mean())
        uv = tracks.uv()
        both = visible[:, 1:] & visible[:, :-1]
        steps.extend(np.linalg.norm(np.diff(uv, axis=1), axis=-1)[both])
    return TrackStatistics(
        avg_points_per_video=float(np.mean([len(t) for t in videos])) if videos else 0.0,
        occlusion_rate_trajectory=float(np.mean(per_track)) if per_track else 0.0,
        occlusion_rate_video=float(np.mean(per_video)) if per_video else 0.0,
        avg_motion=float(np.mean(steps)) if steps else 0.0,
        num_videos=len(videos),
    )
