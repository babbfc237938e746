"""
Dataset directories: writing and validated ingestion.

    <dir>/frames/frame_0000.png          RGB frames
    <dir>/masks/object_0/frame_0000.png  binary mask per object and frame
    <dir>/depth/frame_0000.f32           depth planes
    <dir>/cameras.json                   intrinsics + per-frame world_to_cam
    <dir>/flow/frame_0000.f32            optional forward flow t -> t+1 (T-1 planes)
    <dir>/tracks.csv                     optional ground-truth tracks
    <dir>/prior/object_0.npz             optional ground-truth novel views
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from ..clients.prior_client import save_prior_views
from ..core.errors import DatasetError
from ..models.camera import CameraPath
from ..render.image_io import image_size, plane_shape, read_image, read_mask, read_plane, write_image, write_plane
from .tracks import TrackSet, read_tracks_csv, write_tracks_csv

FRAMES = "frames"
MASKS = "masks"
DEPTH = "depth"
FLOW = "flow"
PRIOR = "prior"
CAMERAS = "cameras.json"
TRACKS = "tracks.csv"


def frame_name(t: int, suffix: str) -> str:
    return f"frame_{t:04d}{suffix}"


@dataclass
class VideoDataset:
    """A validated dataset held in memory."""
    root: Path
    frames: np.ndarray   # (T, H, W, 3) in [0, 1]
    masks: np.ndarray    # (O, T, H, W) bool
    depth: np.ndarray    # (T, H, W)
    cameras: CameraPath
    flow: Optional[np.ndarray] = None      # (T-1, H, W, 2)
    tracks: Optional[TrackSet] = None
    prior_views: Dict[int, Path] = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_objects(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def targets(self):
        from ..pipelines.dynamic_fit import VideoTargets
        return VideoTargets.from_arrays(self.frames, self.masks, self.depth, self.cameras, self.flow)


def write_dataset(root: Union[str, Path], frames: np.ndarray, masks: np.ndarray, depth: np.ndarray,
                  cameras: CameraPath, flow: Optional[np.ndarray] = None, tracks: Optional[TrackSet] = None,
                  prior_views: Optional[Dict[int, List[Tuple[np.ndarray, np.ndarray]]]] = None) -> Path:
    """
    Write a dataset directory.

    Args:
        frames: (T, H, W, 3) in [0, 1]
        masks: (O, T, H, W)
        depth: (T, H, W)
        cameras: Per-frame cameras
        flow: Optional (T-1, H, W, 2)
        tracks: Optional ground-truth tracks
        prior_views: Optional per-object (object-centric world_to_cam, crop image) pairs
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_image(root / FRAMES / frame_name(t, ".png"), frame)
        write_plane(root / DEPTH / frame_name(t, ".f32"), depth[t])
    for o in range(masks.shape[0]):
        for t in range(masks.shape[1]):
            write_image(root / MASKS / f"object_{o}" / frame_name(t, ".png"),
                        np.asarray(masks[o, t], dtype=np.float64))
    if flow is not None:
        for t, plane in enumerate(flow):
            write_plane(root / FLOW / frame_name(t, ".f32"), plane)
    cameras.save(root / CAMERAS)
    if tracks is not None:
        write_tracks_csv(tracks, root / TRACKS)
    for o, views in (prior_views or {}).items():
        (root / PRIOR).mkdir(parents=True, exist_ok=True)
        save_prior_views(root / PRIOR / f"object_{o}.npz", views)
    logger.info(f"Wrote dataset with {len(frames)} frames and {masks.shape[0]} objects to {root}")
    return root


def _listing(directory: Path, suffix: str) -> List[Path]:
    return sorted(directory.glob(f"*{suffix}"))


def _check_count(files: List[Path], expected: int, stream: str):
    if len(files) != expected:
        raise DatasetError(f"Stream '{stream}' has {len(files)} files, expected {expected}", files)


def ingest(root: Union[str, Path]) -> VideoDataset:
    """
    Load and validate a dataset directory.

    Frames, masks, depth and cameras are required; flow, tracks and prior
    views are optional and reported in ``missing`` when absent.

    Raises:
        DatasetError: naming the offending stream and files
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")

    frame_files = _listing(root / FRAMES, ".png")
    if not frame_files:
        raise DatasetError("Missing required stream 'frames'", [root / FRAMES])
    T = len(frame_files)
    H, W = image_size(frame_files[0])
    wrong = [f for f in frame_files if image_size(f) != (H, W)]
    if wrong:
        raise DatasetError(f"Frames differ in resolution (expected {W}x{H})", wrong)

    depth_dir = root / DEPTH
    depth_files = _listing(depth_dir, ".f32")
    if not depth_files:
        raise DatasetError("Missing required stream 'depth'", [depth_dir])
    _check_count(depth_files, T, "depth")
    wrong = [f for f in depth_files if tuple(plane_shape(f)) != (H, W, 1)]
    if wrong:
        raise DatasetError(f"Depth planes differ from frame resolution {W}x{H}", wrong)

    object_dirs = sorted((p for p in (root / MASKS).glob("object_*") if p.is_dir()),
                         key=lambda p: int(p.name.split("_")[1])) if (root / MASKS).is_dir() else []
    if not object_dirs:
        raise DatasetError("Missing required stream 'masks'", [root / MASKS])
    mask_files = []
    for directory in object_dirs:
        files = _listing(directory, ".png")
        _check_count(files, T, f"masks/{directory.name}")
        mask_files.append(files)
    wrong = [f for files in mask_files for f in files if image_size(f) != (H, W)]
    if wrong:
        raise DatasetError(f"Masks differ from frame resolution {W}x{H}", wrong)

    camera_file = root / CAMERAS
    if not camera_file.exists():
        raise DatasetError("Missing required stream 'cameras'", [camera_file])
    try:
        cameras = CameraPath.load(camera_file)
    except (ValueError, KeyError) as e:
        raise DatasetError(f"Invalid camera file: {e}", [camera_file]) from e
    if cameras.num_frames != T or (cameras.width, cameras.height) != (W, H):
        raise DatasetError(f"Camera file describes {cameras.num_frames} frames at {cameras.width}x{cameras.height}, "
                           f"expected {T} at {W}x{H}", [camera_file])

    missing = []
    flow = None
    flow_files = _listing(root / FLOW, ".f32")
    if flow_files:
        _check_count(flow_files, T - 1, "flow")
        wrong = [f for f in flow_files if tuple(plane_shape(f)) != (H, W, 2)]
        if wrong:
            raise DatasetError(f"Flow planes differ from frame resolution {W}x{H}", wrong)
        flow = np.stack([read_plane(f, squeeze=False) for f in flow_files])
    else:
        missing.append("flow")
        logger.warning(f"No flow stream in {root}; flow supervision disabled")

    tracks = None
    if (root / TRACKS).exists():
        tracks = read_tracks_csv(root / TRACKS)
        if len(tracks) and tracks.num_frames != T:
            raise DatasetError(f"Tracks span {tracks.num_frames} frames, expected {T}", [root / TRACKS])
    else:
        missing.append("tracks")

    prior_views = {int(p.stem.split("_")[1]): p for p in sorted((root / PRIOR).glob("object_*.npz"))}
    if not prior_views:
        missing.append("prior")

    dataset = VideoDataset(
        root=root,
        frames=np.stack([read_image(f) for f in frame_files]),
        masks=np.stack([np.stack([read_mask(f) for f in files]) for files in mask_files]),
        depth=np.stack([read_plane(f) for f in depth_files]),
        cameras=cameras,
        flow=flow,
        tracks=tracks,
        prior_views=prior_views,
        missing=missing,
    )
    logger.info(f"Ingested {root}: {T} frames at {W}x{H}, {dataset.num_objects} objects"
                + (f", missing optional streams {missing}" if missing else ""))
    return dataset
