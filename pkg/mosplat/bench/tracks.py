"""
Point tracks and their CSV form.

``tracks.csv`` columns: track_id, frame, u, v, x, y, z, visible, object_id.
Visibility is written as 0/1.
"""
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
from loguru import logger

from ..core.errors import DatasetError

COLUMNS = ("track_id", "frame", "u", "v", "x", "y", "z", "visible", "object_id")


@dataclass
class Track:
    """One tracked point over every frame."""
    track_id: int
    object_id: int
    uv: np.ndarray       # (T, 2) pixels
    xyz: np.ndarray      # (T, 3) world
    visible: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        T = self.uv.shape[0]
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(T, 3)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(T)

    @property
    def num_frames(self) -> int:
        return self.uv.shape[0]


class TrackSet:
    """Tracks keyed by id, all spanning the same dense frame range 0..T-1."""

    def __init__(self, tracks: Iterable[Track]):
        self._tracks: Dict[int, Track] = {}
        for track in tracks:
            if track.track_id in self._tracks:
                raise DatasetError(f"Duplicate track id {track.track_id}")
            self._tracks[track.track_id] = track
        lengths = {t.num_frames for t in self._tracks.values()}
        if len(lengths) > 1:
            raise DatasetError(f"Tracks span different frame counts: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self._tracks)

    def __iter__(self) -> Iterator[Track]:
        return iter(self._tracks[i] for i in self.ids)

    def __getitem__(self, track_id: int) -> Track:
        return self._tracks[track_id]

    @property
    def ids(self) -> List[int]:
        return sorted(self._tracks)

    @property
    def num_frames(self) -> int:
        return next(iter(self._tracks.values())).num_frames if self._tracks else 0

    def uv(self) -> np.ndarray:
        """(N, T, 2) in id order."""
        return np.stack([t.uv for t in self]) if len(self) else np.zeros((0, 0, 2))

    def visibility(self) -> np.ndarray:
        """(N, T) in id order."""
        return np.stack([t.visible for t in self]) if len(self) else np.zeros((0, 0), dtype=bool)

    def validate(self, width: int, height: int):
        """Visible points must lie inside the image."""
        for track in self:
            u, v = track.uv[:, 0], track.uv[:, 1]
            outside = track.visible & ((u < -0.5) | (u > width - 0.5) | (v < -0.5) | (v > height - 0.5))
            if outside.any():
                frames = np.nonzero(outside)[0].tolist()
                raise DatasetError(f"Track {track.track_id} visible outside the image at frames {frames}")

    def rescaled(self, sx: float, sy: float) -> "TrackSet":
        """Pixel coordinates multiplied by (sx, sy); world points untouched."""
        return TrackSet(Track(t.track_id, t.object_id, t.uv * np.array([sx, sy]), t.xyz, t.visible) for t in self)


def write_tracks_csv(tracks: TrackSet, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COLUMNS)
        for track in tracks:
            for frame in range(track.num_frames):
                u, v = track.uv[frame]
                x, y, z = track.xyz[frame]
                writer.writerow([track.track_id, frame, repr(float(u)), repr(float(v)), repr(float(x)),
                                 repr(float(y)), repr(float(z)), int(track.visible[frame]), track.object_id])
    logger.debug(f"Wrote {len(tracks)} tracks to {path}")


def read_tracks_csv(path: Union[str, Path]) -> TrackSet:
    """
    Read ``tracks.csv``.

    Raises:
        DatasetError: on missing columns or non-dense frame indices
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError("Track file not found", [path])
    rows: Dict[int, List[dict]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in COLUMNS[:8] if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"Track file lacks columns {missing}", [path])
        for row in reader:
            rows.setdefault(int(row["track_id"]), []).append(row)

    tracks = []
    for track_id, entries in rows.items():
        entries.sort(key=lambda r: int(r["frame"]))
        frames = [int(r["frame"]) for r in entries]
        if frames != list(range(len(frames))):
            raise DatasetError(f"Track {track_id} frames are not dense 0..T-1", [path])
        object_id: Optional[str] = entries[0].get("object_id")
        tracks.append(Track(
            track_id=track_id,
            object_id=int(object_id) if object_id not in (None, "") else -1,
            uv=[[float(r["u"]), float(r["v"])] for r in entries],
            xyz=[[float(r["x"]), float(r["y"]), float(r["z"])] for r in entries],
            visible=[r["visible"].strip() in ("1", "true", "True") for r in entries],
        ))
    return TrackSet(tracks)
