"""
Benchmark harness: dataset directories, tracks, metrics and statistics.

The synthetic scene generator lives in ``mosplat.bench.synth``.
"""
from .dataset import VideoDataset, ingest, write_dataset
from .metrics import evaluate_tracks, metric_endpoint, metric_psnr, metric_psnr_masked, metric_trajectory
from .stats import track_stats
from .tracks import Track, TrackSet, read_tracks_csv, write_tracks_csv

__all__ = [
    "VideoDataset", "ingest", "write_dataset",
    "evaluate_tracks", "metric_endpoint", "metric_psnr", "metric_psnr_masked", "metric_trajectory",
    "track_stats", "Track", "TrackSet", "read_tracks_csv", "write_tracks_csv",
]
