"""
Rendering losses and their weighted combination.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from loguru import logger

from ..config import LossWeights
from ..core.diffcore import DTYPE
from ..core.errors import MosplatError, NonFiniteError, ShapeMismatchError

CLASS_EPS = 1e-8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shape(name: str, a: torch.Tensor, b: torch.Tensor):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(name, b.shape, a.shape)


def _gaussian_window(channels: int) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=DTYPE) - SSIM_WINDOW // 2
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    window = g[:, None] @ g[None, :]
    return window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()


def ssim(a: torch.Tensor, b: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """
    Structural similarity of two (H, W, C) images with an 11x11 Gaussian window.

    Returns the mean SSIM, or the (H, W, C) map with ``reduce=False``.
    """
    _check_shape("ssim input", a, b)
    channels = a.shape[-1]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    window = _gaussian_window(channels).to(a.dtype)
    pad = SSIM_WINDOW // 2

    def blur(img):
        return F.conv2d(img, window, padding=pad, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_xx = blur(x * x) - mu_xx
    sigma_yy = blur(y * y) - mu_yy
    sigma_xy = blur(x * y) - mu_xy
    ssim_map = ((2 * mu_xy + SSIM_C1) * (2 * sigma_xy + SSIM_C2)) / (
        (mu_xx + mu_yy + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2))
    ssim_map = ssim_map[0].permute(1, 2, 0)
    return ssim_map.mean() if reduce else ssim_map


def _masked_mean(values: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Mean over pixels (and trailing channels) where ``mask`` (H, W) is set."""
    if mask is None:
        return values.mean()
    mask = mask.to(values.dtype)
    while mask.dim() < values.dim():
        mask = mask.unsqueeze(-1)
    mask = mask.expand_as(values)
    count = mask.sum()
    if float(count) == 0:
        return torch.zeros((), dtype=values.dtype)
    return (values * mask).sum() / count


def loss_rgb(rgb: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None,
             lambda_ssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM), averaged over the masked region."""
    _check_shape("rgb", rgb, target)
    if mask is not None and tuple(mask.shape) != tuple(rgb.shape[:2]):
        raise ShapeMismatchError("rgb mask", rgb.shape[:2], mask.shape)
    l1 = _masked_mean((rgb - target).abs(), mask)
    if lambda_ssim == 0:
        return l1
    dssim = _masked_mean(1.0 - ssim(rgb, target, reduce=False), mask)
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim


def flow_valid_mask(alpha: torch.Tensor, target_flow: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Pixels with enough rendered coverage and a defined target flow."""
    return (alpha.detach() > threshold) & torch.isfinite(target_flow).all(-1)


def loss_flow(flow: torch.Tensor, target_flow: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel L1 flow error (pixels) over the valid pixels; 0 when none are valid."""
    _check_shape("flow", flow, target_flow)
    if not bool(valid.any()):
        logger.warning("Flow loss has no valid pixels; contributing 0")
        return torch.zeros((), dtype=flow.dtype)
    target = torch.where(valid[..., None], target_flow, torch.zeros_like(target_flow))
    err = (flow - target).abs().sum(-1)
    return err[valid].mean()


def loss_depth(depth: torch.Tensor, target_depth: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Scale-invariant log-depth L1: the rendered depth is aligned to the
    target by the ratio of masked medians before comparison.
    """
    _check_shape("depth", depth, target_depth)
    if not bool(mask.any()):
        return torch.zeros((), dtype=depth.dtype)
    rendered = depth[mask]
    target = target_depth[mask]
    if bool((target <= 0).any()) or bool((rendered <= 0).any()):
        raise MosplatError("Depth loss requires positive depths over the mask")
    log_r = torch.log(rendered)
    log_t = torch.log(target)
    shift = torch.log(torch.quantile(target, 0.5)) - torch.log(torch.quantile(rendered, 0.5))
    return (log_r + shift - log_t).abs().mean()


def loss_class(instance: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Mean negative log-likelihood of the instance map.

    Args:
        instance: (H, W, K+1) class probabilities
        target: (H, W) integer labels or (H, W, K+1) one-hot
    """
    if target.dim() == instance.dim() - 1:
        if int(target.max()) >= instance.shape[-1] or int(target.min()) < 0:
            raise ShapeMismatchError("class labels", (instance.shape[-1],), (int(target.max()) + 1,))
        target = F.one_hot(target.long(), instance.shape[-1]).to(instance.dtype)
    _check_shape("class target", target, instance)
    return -(target * torch.log(instance + CLASS_EPS)).sum(-1).mean()


@dataclass
class LossBreakdown:
    """Unweighted terms, their weighted contributions and the total."""
    terms: Dict[str, float] = field(default_factory=dict)
    weighted: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def line(self) -> str:
        parts = " ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        return f"total={self.total:.6g} {parts}"


def total_loss(terms: Dict[str, torch.Tensor], weights: LossWeights) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    Weighted sum of named loss terms.

    Term names map to ``LossWeights`` fields by the ``w_`` prefix
    (``rgb`` -> ``w_rgb``). A NaN/Inf term raises ``NonFiniteError`` naming it.
    """
    total = torch.zeros((), dtype=DTYPE)
    breakdown = LossBreakdown()
    for name, value in terms.items():
        weight = getattr(weights, f"w_{name}", None)
        if weight is None:
            raise MosplatError(f"Unknown loss term '{name}'")
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteError(f"loss term '{name}'", f"value={value.detach().tolist()}")
        contribution = weight * value
        total = total + contribution
        breakdown.terms[name] = float(value.detach())
        breakdown.weighted[name] = float(contribution.detach())
    breakdown.total = float(total.detach())
    return total, breakdown
