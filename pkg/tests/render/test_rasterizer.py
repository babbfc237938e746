import numpy as np
import pytest
import torch

from mosplat.config import RasterSettings
from mosplat.core.diffcore import DTYPE, finite_diff_check
from mosplat.core.errors import MosplatError, ShapeMismatchError
from mosplat.models.camera import Camera
from mosplat.models.gaussians import GaussianSet
from mosplat.models.geometry import NEAR_PLANE
from mosplat.render.oracle import composite_pixel_oracle, render_oracle
from mosplat.render.rasterizer import render, render_counter


def _on_axis(colors, opacities, depths):
    n = len(colors)
    g = GaussianSet.from_points(
        positions=torch.tensor([[0.0, 0.0, z] for z in depths], dtype=DTYPE),
        colors=torch.tensor(colors, dtype=DTYPE),
        scales=torch.full((n,), 0.05, dtype=DTYPE),
        opacity=0.5,
        label=0,
    )
    g.opacity_logits = torch.logit(torch.tensor(opacities, dtype=DTYPE)).reshape(n, 1)
    return g


@pytest.fixture
def point_camera():
    # a single pixel whose center lies on the optical axis
    return Camera(fx=20.0, fy=20.0, cx=0.0, cy=0.0, width=1, height=1)


def test_opaque_gaussian_covering_a_pixel(point_camera):
    g = _on_axis([[1.0, 0.0, 0.0]], [1.0 - 1e-9], [2.0])
    out = render(g, point_camera, num_classes=1)
    assert np.allclose(out.rgb[0, 0].numpy(), [1.0, 0.0, 0.0], atol=1e-6)
    assert float(out.alpha[0, 0]) == pytest.approx(1.0, abs=1e-6)
    assert float(out.depth[0, 0]) == pytest.approx(2.0, abs=1e-6)
    assert float(out.instance[0, 0, 0]) == pytest.approx(1.0, abs=1e-6)


def test_front_to_back_half_opacity(point_camera):
    g = _on_axis([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], [0.5, 0.5], [2.0, 3.0])
    out = render(g, point_camera, num_classes=1)
    assert np.allclose(out.rgb[0, 0].numpy(), 0.5, atol=1e-12)
    assert float(out.alpha[0, 0]) == pytest.approx(0.75, abs=1e-12)
    assert float(out.instance[0, 0, 1]) == pytest.approx(0.25, abs=1e-12)


def test_input_order_does_not_matter(point_camera):
    front_first = _on_axis([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], [0.5, 0.5], [2.0, 3.0])
    back_first = _on_axis([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [0.5, 0.5], [3.0, 2.0])
    a = render(front_first, point_camera, num_classes=1)
    b = render(back_first, point_camera, num_classes=1)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-15)


def test_empty_scene_is_background(tiny_camera):
    out = render(GaussianSet.empty(), tiny_camera, num_classes=1)
    assert torch.equal(out.alpha, torch.zeros(32, 32, dtype=DTYPE))
    assert torch.equal(out.instance[..., 1], torch.ones(32, 32, dtype=DTYPE))
    assert torch.equal(out.rgb, torch.zeros(32, 32, 3, dtype=DTYPE))


def test_gaussian_behind_camera_leaves_no_trace(tiny_camera):
    g = _on_axis([[1.0, 1.0, 1.0]], [0.9], [-2.0])
    out = render(g, tiny_camera, num_classes=1)
    assert float(out.alpha.max()) == 0.0
    sample = composite_pixel_oracle((16, 16), g, tiny_camera, num_classes=1)
    assert sample.alpha == 0.0


ORACLE_SCENES = 50
# Pixel-space means on the borders of 16, 8 and 5 pixel tiles.
TILE_BORDERS = [[15.5, 15.5], [16.0, 7.5], [4.5, 20.0], [7.5, 24.5]]


def _oracle_scene(make_gaussians, cam, seed):
    scene = make_gaussians(10 + seed % 41, seed=100 + seed)
    borders = torch.tensor(TILE_BORDERS, dtype=DTYPE)
    z = scene.positions[:4, 2]
    scene.positions[:4, 0] = (borders[:, 0] - cam.cx) * z / cam.fx
    scene.positions[:4, 1] = (borders[:, 1] - cam.cy) * z / cam.fy
    # one just past the near plane, one just short of it
    scene.positions[4] = torch.tensor([5e-4, -3e-4, 2.0 * NEAR_PLANE], dtype=DTYPE)
    scene.opacity_logits[4] = -2.0
    scene.positions[5, 2] = 0.5 * NEAR_PLANE
    return scene


@pytest.mark.parametrize("seed", range(ORACLE_SCENES))
def test_tiled_renderer_matches_the_per_pixel_oracle(tiny_camera, make_gaussians, seed):
    scene = _oracle_scene(make_gaussians, tiny_camera, seed)
    tile_size = 16 if seed % 2 == 0 else (8, 5)[seed // 2 % 2]
    targets = scene.positions + torch.tensor([0.05, -0.02, 0.1], dtype=DTYPE)
    out = render(scene, tiny_camera, flow_targets=targets, num_classes=2,
                 settings=RasterSettings(tile_size=tile_size))
    ref = render_oracle(scene, tiny_camera, num_classes=2, flow_targets=targets)
    for name in ("rgb", "depth", "alpha", "instance", "flow"):
        assert np.abs(getattr(out, name).detach().numpy() - ref[name]).max() <= 1e-6, name
    assert float(out.alpha.max()) > 0.1


def test_instance_map_sums_to_one(tiny_camera, make_gaussians):
    out = render(make_gaussians(30, seed=2), tiny_camera, num_classes=2)
    assert torch.allclose(out.instance.sum(-1), torch.ones(32, 32, dtype=DTYPE), atol=1e-12)


def test_static_scene_has_zero_flow(tiny_camera, make_gaussians):
    scene = make_gaussians(25, seed=4)
    out = render(scene, tiny_camera, flow_targets=scene.positions, num_classes=2)
    assert torch.equal(out.flow, torch.zeros_like(out.flow))


def test_uniform_translation_gives_uniform_flow(tiny_camera, make_gaussians):
    scene = make_gaussians(25, seed=5)
    scene.positions[:, 2] = 3.0
    shift = torch.tensor([0.03, 0.0, 0.0], dtype=DTYPE)
    out = render(scene, tiny_camera, flow_targets=scene.positions + shift, num_classes=2)
    covered = out.alpha > 0.01
    expected = tiny_camera.fx * 0.03 / 3.0
    assert bool(covered.any())
    assert torch.allclose(out.flow[covered][:, 0], torch.full((int(covered.sum()),), expected, dtype=DTYPE),
                          atol=1e-9)


def test_threads_do_not_change_the_image(tiny_camera, make_gaussians):
    scene = make_gaussians(30, seed=9)
    one = render(scene, tiny_camera, num_classes=2, settings=RasterSettings(tile_size=8, threads=1))
    many = render(scene, tiny_camera, num_classes=2, settings=RasterSettings(tile_size=8, threads=4))
    assert torch.equal(one.rgb, many.rgb)


def test_render_counter_counts_calls(tiny_camera, make_gaussians):
    scene = make_gaussians(5)
    before = render_counter.calls
    render(scene, tiny_camera, num_classes=2)
    render(scene, tiny_camera, num_classes=2)
    assert render_counter.calls == before + 2


def test_label_above_background_class_fails(tiny_camera, make_gaussians):
    with pytest.raises(MosplatError):
        render(make_gaussians(5, num_labels=3).with_label(3), tiny_camera, num_classes=2)


def test_misshaped_flow_targets_fail(tiny_camera, make_gaussians):
    with pytest.raises(ShapeMismatchError):
        render(make_gaussians(5), tiny_camera, flow_targets=torch.zeros(4, 3, dtype=DTYPE), num_classes=2)


GRADIENT_INSTANCES = 100


def _channel_objective(scene, cam, seed):
    """Randomly weighted sum of every rendered channel."""
    g = torch.Generator().manual_seed(seed)
    H, W = cam.height, cam.width
    weights = {
        "rgb": torch.rand(H, W, 3, generator=g, dtype=DTYPE) + 0.5,
        "alpha": torch.rand(H, W, generator=g, dtype=DTYPE) + 0.5,
        "depth": 0.01 * torch.rand(H, W, generator=g, dtype=DTYPE),
        "instance": torch.rand(H, W, 3, generator=g, dtype=DTYPE),
        "flow": 0.01 * torch.rand(H, W, 2, generator=g, dtype=DTYPE),
    }
    shift = torch.tensor([0.05, -0.03, 0.1], dtype=DTYPE)

    def objective():
        out = render(scene, cam, flow_targets=scene.positions + shift, num_classes=2)
        return sum((getattr(out, name) * w).sum() for name, w in weights.items())

    return objective


@pytest.mark.parametrize("seed", range(GRADIENT_INSTANCES))
def test_rasterizer_gradients_on_random_small_scenes(make_small_scene, seed):
    scene, cam = make_small_scene(seed)
    scene = scene.as_parameters()
    report = finite_diff_check(_channel_objective(scene, cam, seed), scene.parameters(), atol=1e-5)
    assert report.checked == sum(p.numel() for p in scene.parameters())
    assert len(report.non_differentiable) <= report.checked // 2
    assert report.max_rel_error <= 1e-3, report.worst
