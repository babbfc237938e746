"""
Synthetic multi-object scenes with ground truth.

Primitives are ray traced in closed form with numpy (independent of the
splatting renderer) in front of a textured back plane. Objects translate
along their trajectories and carry an unlit procedural texture bound to their
own local coordinates, so a surface point keeps its colour from frame to frame.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
import torch
from loguru import logger

from ..bridge.transforms import CropCamera, init_transforms
from ..config import StageConfig
from ..core.diffcore import DTYPE
from ..core.errors import FrustumError
from ..models.camera import Camera, CameraPath, focal_from_fov
from ..render.novel_view import PROTOCOL_ANGLES, orbit_camera
from ..schemas.scene_spec import ObjectSpec, SceneSpec, TrajectorySpec
from .dataset import write_dataset
from .tracks import Track, TrackSet

NEAR = 0.1
VISIBILITY_TOLERANCE = 1e-5


def _crossing2() -> SceneSpec:
    return SceneSpec(
        name="crossing2", num_frames=24, background_seed=3,
        objects=[
            ObjectSpec(shape="sphere", size=0.5, texture_seed=1,
                       trajectory=TrajectorySpec(kind="crossing", start=[-1.2, 0.0, 4.0], end=[1.2, 0.0, 4.0])),
            ObjectSpec(shape="sphere", size=0.6, texture_seed=2,
                       trajectory=TrajectorySpec(kind="crossing", start=[1.4, 0.0, 5.5], end=[-1.4, 0.0, 5.5])),
        ],
    )


def _single() -> SceneSpec:
    return SceneSpec(
        name="single", num_frames=12, background_seed=4,
        objects=[
            ObjectSpec(shape="ellipsoid", size=0.7, axes=[1.0, 0.8, 0.9], texture_seed=4,
                       trajectory=TrajectorySpec(kind="linear", start=[-0.3, 0.0, 4.0], end=[0.3, 0.0, 4.0])),
        ],
    )


def _static1() -> SceneSpec:
    return SceneSpec(
        name="static1", num_frames=8, background_seed=5,
        objects=[
            ObjectSpec(shape="sphere", size=0.6, texture_seed=5,
                       trajectory=TrajectorySpec(kind="static", start=[0.0, 0.0, 4.0])),
        ],
    )


def _linear2() -> SceneSpec:
    # the box center moves 3 px per frame at depth 4
    step = 3.0 * 4.0 / focal_from_fov(128, 50.0)
    return SceneSpec(
        name="linear2", num_frames=10, background_seed=6,
        objects=[
            ObjectSpec(shape="box", size=0.4, texture_seed=6,
                       trajectory=TrajectorySpec(kind="linear", start=[-0.8, 0.0, 4.0], end=[-0.8 + 9 * step, 0.0, 4.0])),
            ObjectSpec(shape="sphere", size=0.5, texture_seed=7,
                       trajectory=TrajectorySpec(kind="linear", start=[0.8, -0.5, 6.0], end=[0.8, 0.5, 6.0])),
        ],
    )


PRESETS: Dict[str, Callable[[], SceneSpec]] = {
    "crossing2": _crossing2,
    "single": _single,
    "static1": _static1,
    "linear2": _linear2,
}


def preset(name: str) -> SceneSpec:
    if name not in PRESETS:
        raise ValueError(f"Unknown scene preset '{name}' (available: {', '.join(PRESETS)})")
    return PRESETS[name]()


def object_center(trajectory: TrajectorySpec, t: int, num_frames: int) -> np.ndarray:
    start = np.asarray(trajectory.start, dtype=np.float64)
    s = t / (num_frames - 1)
    if trajectory.kind == "static":
        return start
    if trajectory.kind in ("linear", "crossing"):
        return start + s * (np.asarray(trajectory.end, dtype=np.float64) - start)
    angle = 2.0 * np.pi * trajectory.turns * s
    return start + trajectory.radius * np.array([np.cos(angle), np.sin(angle), 0.0])


@dataclass
class _Texture:
    """Smooth procedural colour field."""
    base: np.ndarray    # (3,)
    freqs: np.ndarray   # (3, 3)
    phases: np.ndarray  # (3,)
    amplitude: float = 0.2

    @classmethod
    def seeded(cls, seed: int, texture_seed: int, scale: float) -> "_Texture":
        rng = np.random.default_rng([seed, texture_seed])
        return cls(rng.uniform(0.25, 0.75, 3), rng.uniform(1.0, 3.0, (3, 3)) / scale, rng.uniform(0, 2 * np.pi, 3))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.base + self.amplitude * np.sin(points @ self.freqs.T + self.phases)


@dataclass
class _Primitive:
    shape: str
    half_axes: np.ndarray  # (3,)
    texture: _Texture

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_axes) if self.shape == "box" else self.half_axes.max())

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit beyond NEAR (inf on a miss); ``origin`` is object-local."""
        if self.shape == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                inverse = 1.0 / dirs
                t1 = (-self.half_axes - origin) * inverse
                t2 = (self.half_axes - origin) * inverse
            t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
            hit = (t_far >= t_near) & (t_near > NEAR)
            return np.where(hit, t_near, np.inf)
        o = origin / self.half_axes
        d = dirs / self.half_axes
        a = (d * d).sum(-1)
        b = 2.0 * (d * o).sum(-1)
        c = (o * o).sum() - 1.0
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t = (-b - root) / (2 * a)
        return np.where((disc >= 0) & (t > NEAR), t, np.inf)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    frames: np.ndarray   # (T, H, W, 3)
    masks: np.ndarray    # (O, T, H, W) visible pixels
    depth: np.ndarray    # (T, H, W)
    flow: np.ndarray     # (T-1, H, W, 2)
    cameras: CameraPath
    tracks: TrackSet
    prior_views: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)

    def write(self, root: Union[str, Path]) -> Path:
        root = write_dataset(root, self.frames, self.masks, self.depth, self.cameras, self.flow, self.tracks,
                             self.prior_views)
        (Path(root) / "scene.json").write_text(self.spec.model_dump_json(indent=2))
        return root


class _Tracer:
    """Closed-form renderer of one scene."""

    def __init__(self, spec: SceneSpec, seed: int):
        self.spec = spec
        self.T = spec.num_frames
        self.primitives = [
            _Primitive(o.shape, o.size * np.asarray(o.axes, dtype=np.float64), _Texture.seeded(seed, o.texture_seed, o.size))
            for o in spec.objects
        ]
        self.background = _Texture.seeded(seed, spec.background_seed, 2.0)
        self.centers = np.stack([[object_center(o.trajectory, t, self.T) for t in range(self.T)] for o in spec.objects])
        f = focal_from_fov(spec.width, spec.fov_deg)
        poses = []
        for t in range(self.T):
            pose = torch.eye(4, dtype=DTYPE)
            eye = np.asarray(spec.camera_start) + t * np.asarray(spec.camera_velocity)
            pose[:3, 3] = -torch.tensor(eye, dtype=DTYPE)
            poses.append(pose)
        self.cameras = CameraPath(f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height, poses)

    @property
    def num_objects(self) -> int:
        return len(self.primitives)

    def check_frustum(self):
        spec = self.spec
        for t in range(self.T):
            cam = self.cameras[t]
            R, trans = cam.rotation.numpy(), cam.translation.numpy()
            plane = spec.background_depth + trans[2]
            for o, primitive in enumerate(self.primitives):
                x, y, z = R @ self.centers[o, t] + trans
                r = primitive.bounding_radius
                if z - r <= NEAR:
                    raise FrustumError(o, t, "behind the camera")
                if z + r >= plane:
                    raise FrustumError(o, t, "behind the background plane")
                u, v = cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy
                du, dv = cam.fx * r / (z - r), cam.fy * r / (z - r)
                if u - du < -0.5 or u + du > spec.width - 0.5 or v - dv < -0.5 or v + dv > spec.height - 0.5:
                    raise FrustumError(o, t)

    @staticmethod
    def rays(pose: np.ndarray, cam: Camera, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World origin and unit-depth world directions through (u, v) pixels."""
        R, trans = pose[:3, :3], pose[:3, 3]
        dirs = np.stack([(pixels[..., 0] - cam.cx) / cam.fx, (pixels[..., 1] - cam.cy) / cam.fy,
                         np.ones(pixels.shape[:-1])], axis=-1)
        return -R.T @ trans, dirs @ R

    def trace(self, origin: np.ndarray, dirs: np.ndarray, t: int, objects: Optional[List[int]] = None,
              with_background: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Nearest hit along each ray at frame ``t``.

        Returns:
            (ray parameter, owner with O for the back plane and -1 for a miss, colour)
        """
        objects = list(range(self.num_objects)) if objects is None else objects
        shape = dirs.shape[:-1]
        best = np.full(shape, np.inf)
        owner = np.full(shape, -1, dtype=np.int64)
        if with_background:
            with np.errstate(divide="ignore"):
                plane = (self.spec.background_depth - origin[2]) / dirs[..., 2]
            plane = np.where(dirs[..., 2] > 0, plane, np.inf)
            owner[np.isfinite(plane)] = self.num_objects
            best = plane
        for o in objects:
            hit = self.primitives[o].intersect(origin - self.centers[o, t], dirs)
            closer = hit < best
            best = np.where(closer, hit, best)
            owner[closer] = o
        colour = np.zeros(shape + (3,))
        points = origin + best[..., None] * dirs
        for o in objects:
            sel = owner == o
            colour[sel] = self.primitives[o].texture(points[sel] - self.centers[o, t])
        sel = owner == self.num_objects
        colour[sel] = self.background(points[sel])
        return best, owner, np.clip(colour, 0.0, 1.0)

    def pixel_grid(self) -> np.ndarray:
        cols, rows = np.meshgrid(np.arange(self.spec.width), np.arange(self.spec.height))
        return np.stack([cols, rows], axis=-1).astype(np.float64)

    def render_frame(self, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(rgb, owner, depth, world points) of frame ``t``."""
        cam = self.cameras[t]
        origin, dirs = self.rays(cam.world_to_cam.numpy(), cam, self.pixel_grid())
        depth, owner, rgb = self.trace(origin, dirs, t)
        return rgb, owner, depth, origin + depth[..., None] * dirs

    def project(self, t: int, points: np.ndarray) -> np.ndarray:
        cam = self.cameras[t]
        local = points @ cam.rotation.numpy().T + cam.translation.numpy()
        return np.stack([cam.fx * local[..., 0] / local[..., 2] + cam.cx,
                         cam.fy * local[..., 1] / local[..., 2] + cam.cy], axis=-1)

    def flow(self, t: int, owner: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Forward flow t -> t+1 of every pixel's surface point."""
        moved = points.copy()
        for o in range(self.num_objects):
            sel = owner == o
            moved[sel] += self.centers[o, t + 1] - self.centers[o, t]
        return self.project(t + 1, moved) - self.project(t, points)

    def is_visible(self, t: int, o: int, point: np.ndarray) -> Tuple[np.ndarray, bool]:
        """Pixel of a world point at frame ``t`` and whether the point is its nearest surface there."""
        cam = self.cameras[t]
        uv = self.project(t, point)
        inside = -0.5 <= uv[0] <= self.spec.width - 0.5 and -0.5 <= uv[1] <= self.spec.height - 0.5
        if not inside:
            return uv, False
        origin, dirs = self.rays(cam.world_to_cam.numpy(), cam, uv[None])
        depth, owner, _ = self.trace(origin, dirs, t)
        z = float((cam.rotation.numpy() @ point + cam.translation.numpy())[2])
        return uv, bool(owner[0] == o and abs(depth[0] - z) <= VISIBILITY_TOLERANCE * max(1.0, z))


def _keypoints(mask: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """(row, col) of ``count`` interior mask pixels."""
    interior = cv2.erode(mask.astype(np.uint8), np.ones((5, 5), np.uint8)) > 0
    if not interior.any():
        interior = mask
    rows, cols = np.nonzero(interior)
    picks = np.sort(rng.choice(rows.size, size=min(count, rows.size), replace=False))
    return np.stack([rows[picks], cols[picks]], axis=-1)


def _ground_truth_tracks(tracer: _Tracer, points: np.ndarray, owner: np.ndarray, masks: np.ndarray,
                         rng: np.random.Generator) -> TrackSet:
    tracks = []
    for o in range(tracer.num_objects):
        for row, col in _keypoints(masks[o, 0], tracer.spec.keypoints_per_object, rng):
            local = points[row, col] - tracer.centers[o, 0]
            uv = np.zeros((tracer.T, 2))
            xyz = np.zeros((tracer.T, 3))
            visible = np.zeros(tracer.T, dtype=bool)
            for t in range(tracer.T):
                xyz[t] = local + tracer.centers[o, t]
                uv[t], visible[t] = tracer.is_visible(t, o, xyz[t])
            tracks.append(Track(len(tracks), o, uv, xyz, visible))
    return TrackSet(tracks)


def _prior_views(tracer: _Tracer, masks: np.ndarray, depth: np.ndarray,
                 cfg: StageConfig) -> Dict[int, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Ground-truth object-centric views of every object at frame 0, at every
    pose the lifting stages can sample plus the fixed protocol angles.
    """
    from ..pipelines.static_lift import novel_pose_grid

    crop = CropCamera(size=cfg.crop_size)
    base = crop.camera()
    angles = [(0.0, 0.0)] + novel_pose_grid(cfg) + list(PROTOCOL_ANGLES)
    trajectories = init_transforms(masks, depth, crop, cfg.crop_fill, reference_seed=cfg.reference_seed)
    cam0 = tracer.cameras[0]
    cols, rows = np.meshgrid(np.arange(crop.size), np.arange(crop.size))
    pixels = np.stack([cols, rows], axis=-1).astype(np.float64)
    views = {}
    for o, trajectory in enumerate(trajectories):
        entries = []
        for elevation, azimuth in angles:
            view = orbit_camera(base, elevation, azimuth, crop.object_center.numpy()).world_to_cam
            pose = trajectory.frame_view(view, 0, cam0).numpy()
            origin, dirs = tracer.rays(pose, base, pixels)
            _, owner, colour = tracer.trace(origin, dirs, 0, objects=[o], with_background=False)
            entries.append((view.numpy(), np.where((owner == o)[..., None], colour, 0.0)))
        views[o] = entries
    return views


def generate_scene(spec: SceneSpec, seed: int = 0, cfg: Optional[StageConfig] = None,
                   workers: int = 1, with_prior: bool = True) -> SyntheticScene:
    """
    Render a scene and its ground truth.

    Deterministic given ``spec`` and ``seed``.

    Raises:
        FrustumError: when an object leaves the view (or hides) at some frame
    """
    cfg = cfg or StageConfig()
    tracer = _Tracer(spec, seed)
    tracer.check_frustum()
    logger.info(f"Generating scene '{spec.name}': {tracer.num_objects} objects, {tracer.T} frames "
                f"at {spec.width}x{spec.height}")

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rendered = list(pool.map(tracer.render_frame, range(tracer.T)))
    frames = np.stack([r[0] for r in rendered])
    owners = np.stack([r[1] for r in rendered])
    depth = np.stack([r[2] for r in rendered])
    masks = np.stack([owners == o for o in range(tracer.num_objects)])
    for o in range(tracer.num_objects):
        if not masks[o, 0].any():
            raise FrustumError(o, 0, "fully hidden")
    flow = np.stack([tracer.flow(t, owners[t], rendered[t][3]) for t in range(tracer.T - 1)])

    rng = np.random.default_rng(seed)
    tracks = _ground_truth_tracks(tracer, rendered[0][3], owners[0], masks, rng)
    prior_views = _prior_views(tracer, masks, depth, cfg) if with_prior else {}
    occluded = 1.0 - tracks.visibility().mean() if len(tracks) else 0.0
    logger.info(f"Scene '{spec.name}' generated: {len(tracks)} tracks, {occluded * 100:.1f}% occluded samples")
    return SyntheticScene(spec, seed, frames, masks, depth, flow, tracer.cameras, tracks, prior_views)
