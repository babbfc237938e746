"""
Point tracks from a fitted model.

Each query pixel on the first frame is lifted to a 3D point on its object and
bound to the object's nearest canonical Gaussians with inverse-distance
weights. Per frame the weighted deformed point is bridged to the world and
projected; it is visible when the rendered front-most instance at its pixel is
the query's object.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np
import torch
from loguru import logger
from scipy.spatial import cKDTree

from ..bench.tracks import Track, TrackSet
from ..bridge.transforms import ObjectTrajectory
from ..config import StageConfig
from ..core.diffcore import DTYPE
from ..core.errors import MosplatError
from ..models.camera import CameraPath
from ..models.deformer import DeformationField
from ..models.gaussians import GaussianSet
from ..render.rasterizer import render
from .dynamic_fit import deform_object, lifted_object, render_frame

TRACK_NEIGHBORS = 4
MIN_COVERAGE = 1e-3


@dataclass
class TrackQuery:
    u: float
    v: float
    object_id: Optional[int] = None
    track_id: Optional[int] = None


@dataclass
class TrackBinding:
    object_id: int
    neighbors: np.ndarray  # (k,)
    weights: np.ndarray    # (k,) sums to 1
    offset: torch.Tensor   # (3,) object-centric


def _point_set(points: torch.Tensor) -> GaussianSet:
    points = points.reshape(-1, 3)
    n = points.shape[0]
    return GaussianSet.from_points(points, torch.zeros(n, 3, dtype=DTYPE), torch.ones(n, dtype=DTYPE), 0.5, 0)


def resolve_object(query: TrackQuery, first_masks: np.ndarray) -> int:
    """
    Object whose first-frame mask contains the query pixel.

    Raises:
        MosplatError: when the pixel is outside the image or outside every
            (or the named) object's mask
    """
    H, W = first_masks.shape[1:]
    row, col = int(round(query.v)), int(round(query.u))
    if not (0 <= row < H and 0 <= col < W):
        raise MosplatError(f"Track query ({query.u}, {query.v}) lies outside the {W}x{H} image")
    if query.object_id is not None:
        if not first_masks[query.object_id, row, col]:
            raise MosplatError(f"Track query ({query.u}, {query.v}) lies outside object {query.object_id}'s mask")
        return query.object_id
    hits = np.nonzero(first_masks[:, row, col])[0]
    if hits.size == 0:
        raise MosplatError(f"Track query ({query.u}, {query.v}) lies outside all object masks")
    return int(hits[0])


def bind_query(query: TrackQuery, object_id: int, canonical: GaussianSet, field_: DeformationField,
               trajectory: ObjectTrajectory, cameras: CameraPath, cfg: StageConfig,
               k: int = TRACK_NEIGHBORS) -> TrackBinding:
    cam = cameras[0]
    with torch.no_grad():
        lifted = lifted_object(canonical, field_, trajectory, cameras, 0)
        out = render(lifted, cam, num_classes=object_id + 1, settings=cfg.raster)
        row, col = int(round(query.v)), int(round(query.u))
        if float(out.alpha[row, col]) > MIN_COVERAGE:
            z = out.depth[row, col]
        else:
            z = torch.quantile(cam.to_camera(lifted.positions)[:, 2], 0.5)
        pixel = torch.tensor([[query.u, query.v]], dtype=DTYPE)
        world = cam.to_world(cam.unproject(pixel, z.reshape(1)))
        point = trajectory.unlift(_point_set(world), 0, cam).positions[0]

    positions = canonical.positions.detach()
    count = min(k, len(canonical))
    if count == 0:
        raise MosplatError(f"Object {object_id} has no Gaussians to bind track queries to")
    distances, neighbors = cKDTree(positions.numpy()).query(point.numpy(), k=count)
    distances = np.atleast_1d(distances)
    neighbors = np.atleast_1d(neighbors)
    inverse = 1.0 / (distances + 1e-9)
    weights = inverse / inverse.sum()
    anchor = (torch.from_numpy(weights)[:, None] * positions[torch.from_numpy(neighbors)]).sum(0)
    return TrackBinding(object_id, neighbors, weights, point - anchor)


def extract_tracks(queries: Sequence[TrackQuery], objects: Sequence[GaussianSet],
                   deformers: Sequence[DeformationField], trajectories: Sequence[ObjectTrajectory],
                   background: Optional[GaussianSet], cameras: CameraPath, first_masks: np.ndarray,
                   cfg: StageConfig) -> TrackSet:
    """
    2D and 3D tracks of first-frame query pixels.

    Args:
        queries: Pixels on frame 0 (object inferred from the masks when not given)
        objects: Canonical object-centric Gaussian sets
        deformers: Deformation field per object
        trajectories: Frame transforms per object
        background: Background Gaussians (occluders for visibility)
        cameras: Camera path of the video
        first_masks: (O, H, W) object masks of frame 0
        cfg: Render settings
    """
    first_masks = np.asarray(first_masks, dtype=bool)
    object_ids = [resolve_object(q, first_masks) for q in queries]
    bindings = [bind_query(q, o, objects[o], deformers[o], trajectories[o], cameras, cfg)
                for q, o in zip(queries, object_ids)]

    T = cameras.num_frames
    uv = np.zeros((len(queries), T, 2))
    xyz = np.zeros((len(queries), T, 3))
    visible = np.zeros((len(queries), T), dtype=bool)
    with torch.no_grad():
        for t in range(T):
            cam = cameras[t]
            deformed = {o: deform_object(objects[o], deformers[o], t)[0].positions for o in set(object_ids)}
            instance = render_frame(objects, deformers, trajectories, background, cameras, t, cfg).instance
            front = instance.argmax(dim=-1)
            for i, binding in enumerate(bindings):
                o = binding.object_id
                local = deformed[o][torch.from_numpy(binding.neighbors)]
                point = (torch.from_numpy(binding.weights)[:, None] * local).sum(0) + binding.offset
                world = trajectories[o].lift(_point_set(point), t, cam).positions[0]
                pixel = cam.project(cam.to_camera(world.reshape(1, 3)))[0]
                uv[i, t] = pixel.numpy()
                xyz[i, t] = world.numpy()
                row, col = int(round(float(pixel[1]))), int(round(float(pixel[0])))
                inside = 0 <= row < cam.height and 0 <= col < cam.width
                visible[i, t] = inside and int(front[row, col]) == o
    logger.info(f"Extracted {len(queries)} tracks over {T} frames "
                f"(visible {visible.mean() * 100 if visible.size else 0:.1f}% of samples)")
    ids = [q.track_id if q.track_id is not None else i for i, q in enumerate(queries)]
    return TrackSet(Track(ids[i], object_ids[i], uv[i], xyz[i], visible[i]) for i in range(len(queries)))


def queries_from_tracks(tracks: TrackSet) -> List[TrackQuery]:
    """First-frame positions of existing tracks as queries (ids in order)."""
    return [TrackQuery(float(t.uv[0, 0]), float(t.uv[0, 1]), t.object_id if t.object_id >= 0 else None, t.track_id)
            for t in tracks]


def sample_queries(first_masks: np.ndarray, per_object: int = 5, seed: int = 0) -> List[TrackQuery]:
    """Seeded query pixels inside every object's eroded first-frame mask."""
    rng = np.random.default_rng(seed)
    queries = []
    for o, mask in enumerate(np.asarray(first_masks, dtype=bool)):
        interior = cv2.erode(mask.astype(np.uint8), np.ones((5, 5), np.uint8)) > 0
        rows, cols = np.nonzero(interior if interior.any() else mask)
        if rows.size == 0:
            logger.warning(f"Object {o} has no first-frame pixels; no queries sampled")
            continue
        for i in np.sort(rng.choice(rows.size, size=min(per_object, rows.size), replace=False)):
            queries.append(TrackQuery(float(cols[i]), float(rows[i]), o, len(queries)))
    return queries
