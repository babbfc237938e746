"""
Shared fixtures: tiny cameras, random Gaussian sets and small synthetic scenes.
"""
import numpy as np
import pytest
import torch

from mosplat.bench.dataset import VideoDataset
from mosplat.bench.synth import generate_scene
from mosplat.config import StageConfig
from mosplat.core.diffcore import DTYPE
from mosplat.models import quaternion as quat
from mosplat.models.camera import Camera
from mosplat.models.gaussians import GaussianSet
from mosplat.pipelines.run_dir import FittedModel
from mosplat.pipelines.stages import lift_scene
from mosplat.schemas.scene_spec import ObjectSpec, SceneSpec, TrajectorySpec


@pytest.fixture
def tiny_camera() -> Camera:
    return Camera(fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32)


def random_gaussians(n: int, seed: int = 0, num_labels: int = 2, sh_degree: int = 1) -> GaussianSet:
    g = torch.Generator().manual_seed(seed)
    positions = torch.empty(n, 3, dtype=DTYPE)
    positions[:, :2] = torch.rand(n, 2, generator=g, dtype=DTYPE) * 1.2 - 0.6
    positions[:, 2] = torch.rand(n, generator=g, dtype=DTYPE) * 2.0 + 2.0
    count = (sh_degree + 1) ** 2
    return GaussianSet(
        positions=positions,
        log_scales=torch.log(torch.rand(n, 3, generator=g, dtype=DTYPE) * 0.07 + 0.03),
        rotations=quat.normalize(torch.randn(n, 4, generator=g, dtype=DTYPE)),
        opacity_logits=torch.randn(n, 1, generator=g, dtype=DTYPE),
        sh_coeffs=torch.randn(n, count, 3, generator=g, dtype=DTYPE) * 0.3,
        instance_label=torch.randint(0, num_labels, (n,), generator=g),
    )


@pytest.fixture
def make_gaussians():
    return random_gaussians


def random_small_scene(seed: int):
    """At most 5 Gaussians in front of a camera of at most 8x8 pixels, footprints of one to a few pixels."""
    g = torch.Generator().manual_seed(1000 + seed)
    n = 1 + seed % 5
    size = 4 + seed % 5
    cam = Camera(fx=float(size), fy=float(size), cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)
    z = torch.rand(n, generator=g, dtype=DTYPE) + 2.0
    positions = torch.empty(n, 3, dtype=DTYPE)
    positions[:, :2] = (torch.rand(n, 2, generator=g, dtype=DTYPE) - 0.5) * 0.8 * z[:, None]
    positions[:, 2] = z
    scene = GaussianSet(
        positions=positions,
        log_scales=torch.log(torch.rand(n, 3, generator=g, dtype=DTYPE) * 0.3 + 0.2),
        rotations=quat.normalize(torch.randn(n, 4, generator=g, dtype=DTYPE)),
        opacity_logits=torch.randn(n, 1, generator=g, dtype=DTYPE) * 0.5,
        sh_coeffs=torch.randn(n, 4, 3, generator=g, dtype=DTYPE) * 0.2,
        instance_label=torch.randint(0, 2, (n,), generator=g),
    )
    return scene, cam


@pytest.fixture
def make_small_scene():
    return random_small_scene


def tiny_scene_spec(moving: bool = True, num_frames: int = 4) -> SceneSpec:
    first = (TrajectorySpec(kind="linear", start=[-0.6, 0.0, 4.0], end=[-0.4, 0.0, 4.0]) if moving
             else TrajectorySpec(kind="static", start=[-0.6, 0.0, 4.0]))
    return SceneSpec(
        name="tiny", num_frames=num_frames, width=48, height=48, background_seed=9, keypoints_per_object=3,
        objects=[
            ObjectSpec(shape="sphere", size=0.5, texture_seed=1, trajectory=first),
            ObjectSpec(shape="sphere", size=0.5, texture_seed=2,
                       trajectory=TrajectorySpec(kind="static", start=[0.6, 0.1, 5.0])),
        ],
    )


def as_dataset(scene, root) -> VideoDataset:
    return VideoDataset(root, scene.frames, scene.masks, scene.depth, scene.cameras, scene.flow, scene.tracks)


@pytest.fixture
def tiny_cfg() -> StageConfig:
    return StageConfig(
        static_steps=2, static_batch=1, init_count=60, init_opacity=0.3,
        background_count=150, background_steps=1,
        dynamic_batch=2, grad_accum=2, novel_views_per_frame=0,
        crop_size=32, num_bases=2, grid_features=4, spatial_resolution=8, head_width=8, head_layers=1,
        maintenance_interval=100,
    )


@pytest.fixture(scope="session")
def tiny_scene():
    return generate_scene(tiny_scene_spec(moving=True), seed=0, with_prior=False)


@pytest.fixture(scope="session")
def static_scene():
    return generate_scene(tiny_scene_spec(moving=False), seed=0, with_prior=False)


@pytest.fixture
def tiny_dataset(tiny_scene, tmp_path) -> VideoDataset:
    return as_dataset(tiny_scene, tmp_path)


@pytest.fixture
def static_dataset(static_scene, tmp_path) -> VideoDataset:
    return as_dataset(static_scene, tmp_path)


@pytest.fixture(scope="session")
def _lifted_checkpoints(tiny_scene, static_scene, tmp_path_factory):
    cfg = StageConfig(
        static_steps=2, static_batch=1, init_count=60, init_opacity=0.3,
        background_count=150, background_steps=1, crop_size=32, maintenance_interval=100,
    )
    root = tmp_path_factory.mktemp("lifted")
    paths = {}
    for name, scene in (("moving", tiny_scene), ("static", static_scene)):
        model, _ = lift_scene(as_dataset(scene, root), cfg)
        paths[name] = root / f"{name}.gmjo"
        model.save(paths[name])
    return paths


@pytest.fixture
def lifted_model(_lifted_checkpoints) -> FittedModel:
    """Freshly loaded lifted model of ``tiny_scene`` (safe to optimize in place)."""
    return FittedModel.load(_lifted_checkpoints["moving"])


@pytest.fixture
def static_lifted_model(_lifted_checkpoints) -> FittedModel:
    return FittedModel.load(_lifted_checkpoints["static"])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
