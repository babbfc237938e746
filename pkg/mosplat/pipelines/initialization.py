"""
Seeding Gaussians from RGB-D observations and pre-fitting the background.
"""
from typing import List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from scipy.spatial import cKDTree

from ..config import StageConfig
from ..core.diffcore import DTYPE, AdamW, ParamGroup, value_and_grad
from ..core.errors import MosplatError, ObjectAbsent
from ..models.camera import Camera
from ..models.gaussians import GaussianSet
from ..objectives.losses import loss_rgb
from ..render.rasterizer import render

MIN_SCALE = 1e-6

# Gaussian field -> learning-rate name in StageConfig
FIELD_LR = {
    "positions": "lr_position_init",
    "log_scales": "lr_scale_rot",
    "rotations": "lr_scale_rot",
    "opacity_logits": "lr_opacity",
    "sh_coeffs": "lr_sh",
}


def gaussian_param_groups(gaussians: GaussianSet, cfg: StageConfig, prefix: str = "") -> List[ParamGroup]:
    """One optimizer group per trainable field, named ``<prefix><field>``."""
    groups = []
    for name, lr_name in FIELD_LR.items():
        tensor = getattr(gaussians, name)
        if tensor.requires_grad:
            groups.append(ParamGroup(f"{prefix}{name}", [tensor], getattr(cfg, lr_name), cfg.weight_decay))
    return groups


def unproject_masked(rgb: np.ndarray, mask: np.ndarray, depth: np.ndarray,
                     cam: Camera) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    World points and colours of the masked pixels with positive depth.

    Returns:
        (points (N, 3), colors (N, 3)) in row-major pixel order
    """
    valid = np.asarray(mask, dtype=bool) & (np.asarray(depth) > 0)
    rows, cols = np.nonzero(valid)
    pixels = torch.tensor(np.stack([cols, rows], axis=-1), dtype=DTYPE)
    z = torch.tensor(np.asarray(depth)[rows, cols], dtype=DTYPE)
    points = cam.to_world(cam.unproject(pixels, z))
    colors = torch.tensor(np.asarray(rgb)[rows, cols], dtype=DTYPE)
    return points, colors


def point_spacing(points: torch.Tensor, neighbors: int = 3) -> torch.Tensor:
    """Root mean squared distance to the nearest ``neighbors`` points."""
    n = points.shape[0]
    if n < 2:
        return torch.full((n,), 1e-2, dtype=DTYPE)
    k = min(neighbors, n - 1)
    distances, _ = cKDTree(points.numpy()).query(points.numpy(), k=k + 1)
    spacing = np.sqrt((distances[:, 1:] ** 2).mean(axis=1))
    return torch.tensor(np.maximum(spacing, MIN_SCALE), dtype=DTYPE)


def _subsample(n: int, count: int, seed: int) -> np.ndarray:
    if count >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))


def init_object_gaussians(rgb: np.ndarray, mask: np.ndarray, depth: np.ndarray, cam: Camera, count: int,
                          label: int = 0, opacity: float = 0.1, sh_degree: int = 1,
                          seed: int = 0) -> GaussianSet:
    """
    Seed one object's Gaussians at its unprojected first-frame pixels.

    Args:
        rgb: (H, W, 3) frame in [0, 1]
        mask: (H, W) object mask
        depth: (H, W) depth map
        cam: Camera of the frame
        count: Maximum number of Gaussians (one per pixel when fewer pixels)
        label: Instance label of the object
        opacity: Initial base opacity

    Raises:
        ObjectAbsent: when the mask has no pixel with positive depth
    """
    points, colors = unproject_masked(rgb, mask, depth, cam)
    if points.shape[0] == 0:
        raise ObjectAbsent(label, 0)
    keep = torch.from_numpy(_subsample(points.shape[0], count, seed))
    points, colors = points[keep], colors[keep]
    scales = point_spacing(points)
    logger.debug(f"Seeded object {label} with {points.shape[0]} Gaussians "
                 f"(median spacing {float(scales.median()):.4g})")
    return GaussianSet.from_points(points, colors, scales, opacity, label, sh_degree)


def init_background(rgb: np.ndarray, background_mask: np.ndarray, depth: np.ndarray, cam: Camera,
                    num_classes: int, count: int, opacity: float = 0.1, sh_degree: int = 1,
                    seed: int = 0) -> GaussianSet:
    """
    Background Gaussians with frozen positions and the background label.

    Colour, opacity, scale and rotation stay trainable.
    """
    points, colors = unproject_masked(rgb, background_mask, depth, cam)
    if points.shape[0] == 0:
        raise MosplatError("Background region is empty")
    keep = torch.from_numpy(_subsample(points.shape[0], count, seed))
    points, colors = points[keep], colors[keep]
    seeded = GaussianSet.from_points(points, colors, point_spacing(points), opacity, num_classes, sh_degree)
    logger.info(f"Initialized background with {len(seeded)} Gaussians")
    return seeded.as_parameters({"positions": False})


def fit_background(background: GaussianSet, rgb: np.ndarray, background_mask: np.ndarray, cam: Camera,
                   cfg: StageConfig, steps: Optional[int] = None) -> List[float]:
    """
    RGB-only pre-fit of the background over its own pixels (in place).

    Returns:
        Loss value of every step
    """
    steps = cfg.background_steps if steps is None else steps
    optimizer = AdamW(gaussian_param_groups(background, cfg, prefix="background."))
    target = torch.as_tensor(np.asarray(rgb), dtype=DTYPE)
    region = torch.as_tensor(np.asarray(background_mask, dtype=bool))
    num_classes = int(background.instance_label.max()) if len(background) else 0

    def objective():
        out = render(background, cam, num_classes=num_classes, settings=cfg.raster)
        return loss_rgb(out.rgb, target, region, cfg.lambda_ssim)

    losses = []
    for step in range(steps):
        value, grads = value_and_grad(objective, optimizer.params, check_finite=cfg.check_finite)
        optimizer.apply(grads)
        background.renormalize_()
        losses.append(value)
        logger.debug(f"background step={step + 1} rgb={value:.6g}")
    if losses:
        logger.info(f"Background fit completed: rgb {losses[0]:.4g} -> {losses[-1]:.4g}")
    return losses
