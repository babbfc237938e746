"""
Brute-force per-pixel compositing over every Gaussian (no tiles, no culling
beyond the per-pixel cutoffs). Used as the equivalence reference of the
tiled renderer.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from ..models.camera import Camera
from ..models.gaussians import GaussianSet
from .rasterizer import ALPHA_EPS, MAHALANOBIS_CUTOFF, MIN_ALPHA, prepare_splats


@dataclass
class PixelSample:
    rgb: np.ndarray       # (3,)
    depth: float
    alpha: float
    instance: np.ndarray  # (K+1,)
    flow: np.ndarray      # (2,)


class _Splats:
    """Detached numpy copies of the screen-space quantities."""

    def __init__(self, gaussians: GaussianSet, cam: Camera, num_classes: int,
                 flow_targets: Optional[torch.Tensor], flow_camera: Optional[Camera], sh_degree: int):
        with torch.no_grad():
            splats = prepare_splats(gaussians, cam, num_classes, flow_targets, flow_camera, sh_degree)
        self.order = splats.order.numpy()
        self.visible = splats.projection.visible.numpy()
        self.means = splats.projection.means2d.numpy()
        self.depth = splats.projection.depth.numpy()
        self.conic = splats.conic.numpy()
        self.opacity = splats.opacity.numpy()
        self.colors = splats.colors.numpy()
        self.flow = splats.flow.numpy()
        self.labels = gaussians.instance_label.numpy()


def _composite(splats: _Splats, x: float, y: float, num_classes: int) -> PixelSample:
    rgb = np.zeros(3)
    instance = np.zeros(num_classes + 1)
    flow = np.zeros(2)
    depth = 0.0
    accum = 0.0
    transmittance = 1.0
    for i in splats.order:
        if not splats.visible[i]:
            continue
        dx = x - splats.means[i, 0]
        dy = y - splats.means[i, 1]
        ca, cb, cc = splats.conic[i]
        power = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        if power > MAHALANOBIS_CUTOFF:
            continue
        alpha = splats.opacity[i] * math.exp(-0.5 * power)
        if alpha < MIN_ALPHA:
            continue
        weight = alpha * transmittance
        rgb += weight * splats.colors[i]
        depth += weight * splats.depth[i]
        flow += weight * splats.flow[i]
        instance[splats.labels[i]] += weight
        accum += weight
        transmittance *= 1.0 - alpha
    norm = max(accum, ALPHA_EPS)
    instance[num_classes] += 1.0 - accum
    return PixelSample(rgb, depth / norm, accum, instance, flow / norm)


def composite_pixel_oracle(pixel: Tuple[int, int], gaussians: GaussianSet, cam: Camera,
                           num_classes: Optional[int] = None, flow_targets: Optional[torch.Tensor] = None,
                           flow_camera: Optional[Camera] = None, sh_degree: int = 1) -> PixelSample:
    """
    Composite one pixel.

    Args:
        pixel: (row, col); the pixel center is (x=col, y=row)
    """
    if num_classes is None:
        num_classes = int(gaussians.instance_label.max()) if len(gaussians) else 0
    splats = _Splats(gaussians, cam, num_classes, flow_targets, flow_camera, sh_degree)
    row, col = pixel
    return _composite(splats, float(col), float(row), num_classes)


def render_oracle(gaussians: GaussianSet, cam: Camera, num_classes: Optional[int] = None,
                  flow_targets: Optional[torch.Tensor] = None, flow_camera: Optional[Camera] = None,
                  sh_degree: int = 1) -> dict:
    """Whole image through the per-pixel oracle, as numpy arrays keyed like RenderOutput."""
    if num_classes is None:
        num_classes = int(gaussians.instance_label.max()) if len(gaussians) else 0
    splats = _Splats(gaussians, cam, num_classes, flow_targets, flow_camera, sh_degree)
    H, W = cam.height, cam.width
    out = {
        "rgb": np.zeros((H, W, 3)),
        "depth": np.zeros((H, W)),
        "alpha": np.zeros((H, W)),
        "instance": np.zeros((H, W, num_classes + 1)),
        "flow": np.zeros((H, W, 2)),
    }
    for row in range(H):
        for col in range(W):
            sample = _composite(splats, float(col), float(row), num_classes)
            out["rgb"][row, col] = sample.rgb
            out["depth"][row, col] = sample.depth
            out["alpha"][row, col] = sample.alpha
            out["instance"][row, col] = sample.instance
            out["flow"][row, col] = sample.flow
    return out
