"""
Static lifting: optimize an object's canonical Gaussians from its
first-frame crop plus novel-view prior gradients.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from ..bridge.transforms import CropCamera
from ..config import StageConfig
from ..core.diffcore import DTYPE, AdamW, expon_lr, value_and_grad
from ..core.errors import DivergenceError, NonFiniteError
from ..models.camera import Camera
from ..models.gaussians import GaussianSet
from ..objectives.losses import LossBreakdown, loss_rgb, total_loss
from ..objectives.priors import PriorProvider, apply_prior, sample_taus
from ..render.novel_view import orbit_camera
from ..render.rasterizer import render
from .initialization import gaussian_param_groups
from .maintenance import MaintenanceReport, prune_and_densify


@dataclass
class StaticLiftResult:
    gaussians: GaussianSet
    history: List[LossBreakdown] = field(default_factory=list)
    maintenance_steps: List[int] = field(default_factory=list)
    reports: List[MaintenanceReport] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.history)


def novel_pose_grid(cfg: StageConfig) -> List[Tuple[float, float]]:
    """
    (elevation, azimuth) pairs on a regular grid, excluding the reference view.

    Azimuth -180 and 180 are the same view and only +180 is kept.
    """
    step = cfg.novel_angle_step
    elevations = step * np.arange(-np.floor(cfg.novel_elevation_max / step), np.floor(cfg.novel_elevation_max / step) + 1)
    azimuths = step * np.arange(-np.floor(cfg.novel_azimuth_max / step), np.floor(cfg.novel_azimuth_max / step) + 1)
    grid = []
    for el in elevations:
        for az in azimuths:
            if el == 0 and az == 0:
                continue
            if az <= -180.0:
                continue
            grid.append((float(el), float(az)))
    return grid


def sample_novel_cameras(rng: np.random.Generator, grid: Sequence[Tuple[float, float]], count: int,
                         base: Camera, pivot: torch.Tensor) -> List[Camera]:
    picks = rng.integers(len(grid), size=count)
    return [orbit_camera(base, grid[i][0], grid[i][1], pivot.numpy()) for i in picks]


def prior_term(gaussians: GaussianSet, cameras: Sequence[Camera], taus: Sequence[float], prior: PriorProvider,
               reference: Optional[np.ndarray], cfg: StageConfig) -> torch.Tensor:
    """Mean prior surrogate over novel object-centric views."""
    total = torch.zeros((), dtype=DTYPE)
    for cam, tau in zip(cameras, taus):
        rgb = render(gaussians, cam, num_classes=1, settings=cfg.raster).rgb
        result = prior.query(rgb.detach().numpy(), cam.world_to_cam.numpy(), reference, tau)
        total = total + apply_prior(rgb, result.gradient)
    return total / max(len(cameras), 1)


def static_lift(gaussians: GaussianSet, crop_rgb: np.ndarray, crop_mask: np.ndarray,
                prior: Optional[PriorProvider], cfg: StageConfig,
                crop: Optional[CropCamera] = None) -> StaticLiftResult:
    """
    Optimize object-centric Gaussians against the reference crop.

    Every step renders the crop camera view (RGB + mask loss) and
    ``static_batch`` novel orbit views whose prior gradients are applied
    through the surrogate. Maintenance runs every ``maintenance_interval``
    steps before the last one.

    Args:
        gaussians: Seeded object-centric Gaussians
        crop_rgb: (S, S, 3) reference crop
        crop_mask: (S, S) reference crop mask
        prior: Novel-view prior provider (None disables the prior)
        cfg: Stage configuration
        crop: Crop camera (default: ``cfg.crop_size``)

    Raises:
        DivergenceError: when a loss or gradient becomes non-finite
    """
    crop = crop or CropCamera(size=cfg.crop_size)
    ref_cam = crop.camera()
    params = gaussians.with_label(0).as_parameters()
    optimizer = AdamW(gaussian_param_groups(params, cfg))
    schedule = expon_lr(cfg.lr_position_init, cfg.lr_position_final, cfg.static_steps)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    weights = cfg.loss_weights
    grid = novel_pose_grid(cfg)
    use_prior = prior is not None and weights.w_prior > 0 and cfg.static_batch > 0

    target = torch.as_tensor(np.asarray(crop_rgb), dtype=DTYPE)
    mask = torch.as_tensor(np.asarray(crop_mask, dtype=bool)).to(DTYPE)
    reference = np.asarray(crop_rgb, dtype=np.float64)
    grad_accum = torch.zeros(len(params), dtype=DTYPE)
    result = StaticLiftResult(params)

    logger.info(f"Starting static lift: {len(params)} Gaussians, {cfg.static_steps} steps, "
                f"prior={'on' if use_prior else 'off'}")
    for step in range(1, cfg.static_steps + 1):
        optimizer.set_lr("positions", schedule(step - 1))
        if use_prior:
            cameras = sample_novel_cameras(rng, grid, cfg.static_batch, ref_cam, crop.object_center)
            taus = sample_taus(rng, cfg.static_batch, cfg.tau_min, cfg.tau_max)
        latest = {}

        def objective():
            out = render(params, ref_cam, num_classes=1, settings=cfg.raster)
            terms = {
                "rgb": loss_rgb(out.rgb, target, None, cfg.lambda_ssim),
                "mask": ((out.alpha - mask) ** 2).mean(),
            }
            if use_prior:
                terms["prior"] = prior_term(params, cameras, taus, prior, reference, cfg)
            total, breakdown = total_loss(terms, weights)
            latest["breakdown"] = breakdown
            return total

        try:
            _, grads = value_and_grad(objective, optimizer.params, check_finite=cfg.check_finite)
        except NonFiniteError as e:
            partial = latest["breakdown"].terms if "breakdown" in latest else {}
            logger.error(f"Static lift diverged at step {step}: {e}")
            raise DivergenceError("static_lift", step, {"cause": e.operation, **partial}) from e

        for p, g in zip(optimizer.params, grads):
            if p is params.positions and g is not None:
                grad_accum += torch.linalg.norm(g, dim=-1)
        optimizer.apply(grads)
        params.renormalize_()
        breakdown = latest["breakdown"]
        result.history.append(breakdown)
        logger.debug(f"static step={step} {breakdown.line()}")

        if step % cfg.maintenance_interval == 0 and step < cfg.static_steps:
            params, report = prune_and_densify(params, grad_accum, cfg, optimizer, generator)
            grad_accum = torch.zeros(len(params), dtype=DTYPE)
            result.maintenance_steps.append(step)
            result.reports.append(report)
            logger.info(f"Maintenance at step {step}: {report.after} Gaussians "
                        f"(pruned {report.pruned}, split {report.split})")

    result.gaussians = params.detach().with_label(int(gaussians.instance_label[0]) if len(gaussians) else 0)
    logger.info(f"Static lift completed: {len(result.gaussians)} Gaussians, "
                f"final {result.history[-1].line() if result.history else 'n/a'}")
    return result
