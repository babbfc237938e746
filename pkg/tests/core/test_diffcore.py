import math

import pytest
import torch

from mosplat.core.diffcore import (
    DTYPE,
    AdamW,
    ParamGroup,
    accumulate_grads,
    adamw_step,
    expon_lr,
    finite_diff_check,
    param_tensor,
    value_and_grad,
)
from mosplat.core.errors import MosplatError, NonFiniteError, ShapeMismatchError
from mosplat.models.camera import Camera
from mosplat.models.gaussians import GaussianSet
from mosplat.render.rasterizer import render


def test_param_tensor_is_float64_with_zero_grad():
    p = param_tensor([1, 2, 3])
    assert p.dtype == torch.float64
    assert torch.equal(p.grad, torch.zeros(3, dtype=DTYPE))


def test_value_and_grad_of_square():
    x = param_tensor(3.0)
    value, (grad,) = value_and_grad(lambda: x * x, [x])
    assert value == 9.0
    assert float(grad) == 6.0


def test_value_and_grad_of_sum_is_ones():
    x = param_tensor([1.0, 2.0, 3.0])
    value, (grad,) = value_and_grad(lambda: x.sum(), [x])
    assert value == 6.0
    assert torch.equal(grad, torch.ones(3, dtype=DTYPE))


def test_value_and_grad_skips_frozen_tensors():
    x = param_tensor([1.0, 2.0])
    frozen = param_tensor([5.0], requires_grad=False)
    _, grads = value_and_grad(lambda: (x * frozen).sum(), [x, frozen])
    assert grads[1] is None
    assert torch.equal(grads[0], torch.full((2,), 5.0, dtype=DTYPE))


def test_value_and_grad_rejects_non_scalar_objective():
    x = param_tensor([1.0, 2.0])
    with pytest.raises(ShapeMismatchError):
        value_and_grad(lambda: x * 2, [x])


def test_non_finite_forward_names_the_operation():
    x = param_tensor([-1.0])
    with pytest.raises(NonFiniteError) as err:
        value_and_grad(lambda: torch.log(x).sum(), [x])
    assert "log" in err.value.operation
    assert isinstance(err.value, MosplatError)


def test_accumulated_micro_batches_equal_the_full_batch():
    x = param_tensor([0.5, -1.0, 2.0, 3.0])
    _, (full,) = value_and_grad(lambda: (x ** 2).sum(), [x])

    x.grad.zero_()
    values = accumulate_grads([lambda: (x[:2] ** 2).sum(), lambda: (x[2:] ** 2).sum()], [x])
    assert sum(values) == pytest.approx(float((x ** 2).sum()))
    assert torch.allclose(x.grad, full, rtol=0, atol=1e-12)


def test_adamw_first_step():
    theta = param_tensor([1.0])
    opt = AdamW([ParamGroup("theta", [theta], lr=0.01)])
    adamw_step(opt, [torch.tensor([0.5], dtype=DTYPE)])
    assert float(theta) == pytest.approx(0.99, abs=1e-6)


def test_adamw_zero_gradient_leaves_parameter():
    theta = param_tensor([1.0])
    opt = AdamW([ParamGroup("theta", [theta], lr=0.01)])
    adamw_step(opt, [torch.zeros(1, dtype=DTYPE)])
    assert float(theta) == 1.0


def test_adamw_decoupled_weight_decay():
    theta = param_tensor([1.0])
    opt = AdamW([ParamGroup("theta", [theta], lr=0.01, weight_decay=0.1)])
    adamw_step(opt, [torch.zeros(1, dtype=DTYPE)])
    assert float(theta) == pytest.approx(0.999, abs=1e-12)


def test_adamw_rejects_misshaped_gradient():
    theta = param_tensor([1.0, 2.0])
    opt = AdamW([ParamGroup("theta", [theta], lr=0.01)])
    with pytest.raises(ShapeMismatchError):
        opt.apply([torch.zeros(3, dtype=DTYPE)])


def test_adamw_group_learning_rates():
    a, b = param_tensor([1.0]), param_tensor([1.0])
    opt = AdamW([ParamGroup("a", [a], lr=0.1), ParamGroup("b", [b], lr=0.2)])
    opt.set_lr("a", 0.05)
    assert opt.get_lr("a") == 0.05
    assert opt.get_lr("b") == 0.2
    with pytest.raises(KeyError):
        opt.get_lr("missing")


def test_adamw_replace_keeps_moments_row_aligned():
    old = param_tensor(torch.zeros(3, 2))
    opt = AdamW([ParamGroup("rows", [old], lr=0.01)])
    grad = torch.tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]], dtype=DTYPE)
    opt.apply([grad])
    before = opt.state_of(old).first_moment

    new = param_tensor(torch.zeros(3, 2))
    opt.replace(old, new, keep_index=torch.tensor([0, 2]), appended=1)
    after = opt.state_of(new)
    assert torch.equal(after.first_moment[0], before[0])
    assert torch.equal(after.first_moment[1], before[2])
    assert torch.equal(after.first_moment[2], torch.zeros(2, dtype=DTYPE))
    assert after.step_count == 1
    assert opt.params[0] is new


def test_expon_lr_endpoints():
    schedule = expon_lr(1e-3, 1e-5, 100)
    assert schedule(0) == pytest.approx(1e-3)
    assert schedule(100) == pytest.approx(1e-5)
    assert schedule(50) == pytest.approx(math.sqrt(1e-3 * 1e-5))


def test_finite_diff_smooth_function():
    x = param_tensor([0.3])
    report = finite_diff_check(lambda: torch.sin(x).sum(), [x])
    assert report.max_rel_error <= 1e-6
    assert report.passed


def test_finite_diff_flags_hard_threshold_as_non_differentiable():
    x = param_tensor([0.3])
    report = finite_diff_check(lambda: torch.where(x > 0.3, x, torch.zeros_like(x)).sum(), [x])
    assert len(report.non_differentiable) == 1
    assert report.checked == 1


def _two_gaussian_scene():
    base = GaussianSet.from_points(
        positions=torch.tensor([[0.0, 0.0, 2.0], [0.2, -0.1, 3.0]], dtype=DTYPE),
        colors=torch.tensor([[0.8, 0.3, 0.1], [0.1, 0.5, 0.9]], dtype=DTYPE),
        scales=torch.tensor([[0.5, 0.35, 0.4], [0.6, 0.45, 0.5]], dtype=DTYPE),
        opacity=0.6,
        label=0,
        rotations=torch.tensor([[0.9, 0.1, 0.2, 0.3], [0.8, -0.3, 0.1, 0.2]], dtype=DTYPE),
    )
    base.sh_coeffs[:, 1:] = torch.tensor([[0.05, -0.02, 0.03]], dtype=DTYPE)
    return base.as_parameters()


def test_rasterizer_gradients_match_finite_differences():
    scene = _two_gaussian_scene()
    cam = Camera(fx=4.0, fy=4.0, cx=1.5, cy=1.5, width=4, height=4)
    weights = torch.linspace(0.5, 1.5, 4 * 4 * 3, dtype=DTYPE).reshape(4, 4, 3)

    def objective():
        out = render(scene, cam, num_classes=1)
        return (out.rgb * weights).sum() + out.alpha.sum()

    report = finite_diff_check(objective, scene.parameters())
    assert report.max_rel_error <= 1e-4
    assert len(report.non_differentiable) < report.checked / 2


def test_compositing_gradients_at_a_single_pixel():
    scene = _two_gaussian_scene()
    cam = Camera(fx=4.0, fy=4.0, cx=0.0, cy=0.0, width=1, height=1)

    def objective():
        out = render(scene, cam, num_classes=1)
        return out.rgb.sum() + 0.5 * out.alpha.sum()

    report = finite_diff_check(objective, [scene.positions, scene.opacity_logits, scene.sh_coeffs])
    assert report.max_rel_error <= 1e-4
