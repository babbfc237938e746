import math

import pytest
import torch

from mosplat.config import LossWeights
from mosplat.core.diffcore import DTYPE, finite_diff_check
from mosplat.core.errors import MosplatError, NonFiniteError, ShapeMismatchError
from mosplat.objectives.losses import (
    flow_valid_mask,
    loss_class,
    loss_depth,
    loss_flow,
    loss_rgb,
    ssim,
    total_loss,
)
from mosplat.render.rasterizer import render


def _image(value=0.3, h=12, w=12):
    g = torch.Generator().manual_seed(0)
    return value + 0.2 * torch.rand(h, w, 3, generator=g, dtype=DTYPE)


def test_identical_images_have_zero_rgb_loss():
    image = _image()
    assert float(loss_rgb(image, image.clone())) == pytest.approx(0.0, abs=1e-12)
    assert float(ssim(image, image.clone())) == pytest.approx(1.0, abs=1e-12)


def test_constant_offset_l1():
    image = _image()
    assert float(loss_rgb(image + 0.1, image, lambda_ssim=0.0)) == pytest.approx(0.1, abs=1e-12)


def test_rgb_loss_ignores_pixels_outside_the_mask():
    image = _image()
    other = image.clone()
    other[:, 6:] += 0.5
    mask = torch.zeros(12, 12, dtype=torch.bool)
    mask[:, :6] = True
    assert float(loss_rgb(other, image, mask, lambda_ssim=0.0)) == pytest.approx(0.0, abs=1e-12)


def test_rgb_loss_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        loss_rgb(_image(h=12), _image(h=10))


def test_flow_loss_examples():
    flow = torch.zeros(2, 2, 2, dtype=DTYPE)
    flow[..., 0] = 1.0
    target = torch.zeros(2, 2, 2, dtype=DTYPE)
    everywhere = torch.ones(2, 2, dtype=torch.bool)
    assert float(loss_flow(flow, target, everywhere)) == pytest.approx(1.0)
    assert float(loss_flow(flow, target, torch.zeros(2, 2, dtype=torch.bool))) == 0.0


def test_flow_valid_mask_needs_coverage_and_finite_targets():
    alpha = torch.tensor([[0.9, 0.9], [0.1, 0.9]], dtype=DTYPE)
    target = torch.zeros(2, 2, 2, dtype=DTYPE)
    target[0, 1, 0] = float("nan")
    assert flow_valid_mask(alpha, target).tolist() == [[True, False], [False, True]]


def test_depth_loss_is_scale_invariant():
    target = torch.linspace(1.0, 3.0, 16, dtype=DTYPE).reshape(4, 4)
    mask = torch.ones(4, 4, dtype=torch.bool)
    assert float(loss_depth(2.0 * target, target, mask)) == pytest.approx(0.0, abs=1e-12)


def test_depth_loss_of_a_half_scaled_region():
    target = torch.full((4, 4), 2.0, dtype=DTYPE)
    rendered = target.clone()
    rendered[2:] *= math.exp(0.1)
    mask = torch.ones(4, 4, dtype=torch.bool)
    # the rendered median is the midpoint of the two levels
    shift = math.log(2.0) - math.log((2.0 + 2.0 * math.exp(0.1)) / 2.0)
    expected = 0.5 * abs(shift) + 0.5 * abs(0.1 + shift)
    assert float(loss_depth(rendered, target, mask)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.05, abs=1e-3)


def test_depth_loss_needs_positive_depths():
    target = torch.ones(2, 2, dtype=DTYPE)
    rendered = target.clone()
    rendered[0, 0] = 0.0
    with pytest.raises(MosplatError):
        loss_depth(rendered, target, torch.ones(2, 2, dtype=torch.bool))
    assert float(loss_depth(rendered, target, torch.zeros(2, 2, dtype=torch.bool))) == 0.0


def test_class_loss_examples():
    labels = torch.tensor([[0, 1], [1, 0]])
    perfect = torch.nn.functional.one_hot(labels, 2).to(DTYPE)
    assert float(loss_class(perfect, labels)) == pytest.approx(0.0, abs=1e-7)
    uniform = torch.full((2, 2, 2), 0.5, dtype=DTYPE)
    assert float(loss_class(uniform, labels)) == pytest.approx(math.log(2.0), abs=1e-7)
    assert float(loss_class(uniform, perfect)) == pytest.approx(math.log(2.0), abs=1e-7)


def test_total_loss_weights_terms():
    terms = {"rgb": torch.tensor(0.5, dtype=DTYPE), "flow": torch.tensor(2.0, dtype=DTYPE)}
    total, breakdown = total_loss(terms, LossWeights())
    assert float(total) == pytest.approx(1.5)
    assert breakdown.weighted == {"rgb": 0.5, "flow": 1.0}
    assert breakdown.total == pytest.approx(1.5)
    zero, _ = total_loss(terms, LossWeights().scaled(0.0))
    assert float(zero) == 0.0


def test_total_loss_rejects_unknown_and_non_finite_terms():
    with pytest.raises(MosplatError):
        total_loss({"style": torch.tensor(1.0, dtype=DTYPE)}, LossWeights())
    with pytest.raises(NonFiniteError) as err:
        total_loss({"rgb": torch.tensor(1.0, dtype=DTYPE), "flow": torch.tensor(float("nan"), dtype=DTYPE)},
                   LossWeights())
    assert "flow" in err.value.operation


FLOW_SHIFT = torch.tensor([0.05, -0.03, 0.1], dtype=DTYPE)


def _term(name, scene, cam, seed):
    """Closure evaluating one loss term on a fresh render of ``scene``, with random targets."""
    g = torch.Generator().manual_seed(seed)
    H, W = cam.height, cam.width
    with torch.no_grad():
        covered = render(scene, cam, num_classes=2).alpha > 0.05
    rgb_target = torch.rand(H, W, 3, generator=g, dtype=DTYPE)
    flow_target = torch.randn(H, W, 2, generator=g, dtype=DTYPE)
    depth_target = torch.rand(H, W, generator=g, dtype=DTYPE) + 2.0
    labels = torch.randint(0, 3, (H, W), generator=g)
    everywhere = torch.ones(H, W, dtype=torch.bool)

    def terms():
        out = render(scene, cam, flow_targets=scene.positions + FLOW_SHIFT, num_classes=2)
        return {
            "rgb": loss_rgb(out.rgb, rgb_target, covered),
            "flow": loss_flow(out.flow, flow_target, everywhere),
            "depth": loss_depth(out.depth, depth_target, covered),
            "class": loss_class(out.instance, labels),
        }

    if name == "total":
        return lambda: total_loss(terms(), LossWeights())[0]
    return lambda: terms()[name]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", ["rgb", "flow", "depth", "class", "total"])
def test_loss_gradients_match_finite_differences(make_small_scene, name, seed):
    scene, cam = make_small_scene(seed)
    scene = scene.as_parameters()
    report = finite_diff_check(_term(name, scene, cam, seed), scene.parameters(), atol=1e-5)
    assert report.checked > 0
    assert len(report.non_differentiable) <= report.checked // 2
    assert report.max_rel_error <= 1e-3, report.worst
