"""
Tiled, differentiable multi-channel Gaussian rasterizer.

All Gaussians of the composed scene are sorted once by camera depth of their
centers (stable, ties broken by input index), binned into 16x16 pixel tiles by
their 3-sigma extent and alpha-composited front to back per tile. Besides RGB
the renderer emits expected depth, accumulated alpha, a per-class instance map
and screen-space flow.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from loguru import logger

from ..config import RasterSettings
from ..core.diffcore import DTYPE
from ..core.errors import MosplatError, ShapeMismatchError
from ..models.camera import Camera
from ..models.gaussians import GaussianSet
from ..models.geometry import NEAR_PLANE, Projection, build_covariance, evaluate_sh, project_gaussians

MAHALANOBIS_CUTOFF = 9.0
MIN_ALPHA = 1.0 / 255.0
ALPHA_EPS = 1e-6


@dataclass
class RenderOutput:
    rgb: torch.Tensor       # (H, W, 3)
    depth: torch.Tensor     # (H, W)
    alpha: torch.Tensor     # (H, W)
    instance: torch.Tensor  # (H, W, K+1), last channel = background
    flow: torch.Tensor      # (H, W, 2) pixels

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def detach(self) -> "RenderOutput":
        return RenderOutput(*(x.detach() for x in (self.rgb, self.depth, self.alpha, self.instance, self.flow)))


class RenderCounter:
    """Counts rasterizer invocations (one sort per call)."""

    def __init__(self):
        self.calls = 0

    def reset(self):
        self.calls = 0


render_counter = RenderCounter()


@dataclass
class SplatInputs:
    """Per-Gaussian screen-space quantities shared by the tiled path and the oracle."""
    projection: Projection
    conic: torch.Tensor     # (N, 3) inverse 2D covariance (a, b, c)
    radius: torch.Tensor    # (N,) 3-sigma extent, detached
    opacity: torch.Tensor   # (N,)
    colors: torch.Tensor    # (N, 3)
    flow: torch.Tensor      # (N, 2)
    onehot: torch.Tensor    # (N, K+1)
    order: torch.Tensor     # (N,) depth order, stable


def prepare_splats(scene: GaussianSet, cam: Camera, num_classes: int,
                   flow_targets: Optional[torch.Tensor] = None, flow_camera: Optional[Camera] = None,
                   sh_degree: int = 1) -> SplatInputs:
    n = len(scene)
    if flow_targets is not None and tuple(flow_targets.shape) != (n, 3):
        raise ShapeMismatchError("flow_targets", (n, 3), flow_targets.shape)
    if n and int(scene.instance_label.max()) > num_classes:
        raise MosplatError(f"Instance label {int(scene.instance_label.max())} exceeds background class {num_classes}")

    cov3d = build_covariance(scene.rotations, torch.exp(scene.log_scales))
    proj = project_gaussians(scene.positions, cov3d, cam)

    a = proj.cov2d[:, 0, 0]
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lambda_max = mid + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
        radius = 3.0 * torch.sqrt(lambda_max)

    degree = min(sh_degree, scene.sh_degree)
    dirs = F.normalize(scene.positions - cam.center, dim=-1) if n else scene.positions
    colors = torch.clamp(evaluate_sh(scene.sh_coeffs, dirs, degree) + 0.5, 0.0, 1.0)

    if flow_targets is not None:
        next_cam = flow_camera or cam
        p_next = next_cam.to_camera(flow_targets)
        z_next = torch.where(p_next[:, 2] > NEAR_PLANE, p_next[:, 2], torch.ones_like(p_next[:, 2]))
        u_next = torch.stack([next_cam.fx * p_next[:, 0] / z_next + next_cam.cx,
                              next_cam.fy * p_next[:, 1] / z_next + next_cam.cy], dim=-1)
        flow = u_next - proj.means2d
    else:
        flow = torch.zeros(n, 2, dtype=DTYPE)

    onehot = F.one_hot(scene.instance_label, num_classes + 1).to(DTYPE)
    order = torch.sort(proj.depth.detach(), stable=True).indices
    return SplatInputs(proj, conic, radius, torch.sigmoid(scene.opacity_logits).reshape(-1),
                       colors, flow, onehot, order)


def composite(pixels: torch.Tensor, splats: SplatInputs, index: torch.Tensor, num_classes: int) -> torch.Tensor:
    """
    Front-to-back compositing of the Gaussians ``index`` (already depth-ordered).

    Args:
        pixels: (P, 2) pixel centers (x, y)
        index: (M,) Gaussian indices in compositing order

    Returns:
        (P, 3 + 1 + 1 + (K+1) + 2) packed channels: rgb, alpha, depth, instance, flow
    """
    channels = 3 + 1 + 1 + (num_classes + 1) + 2
    P = pixels.shape[0]
    if index.numel() == 0:
        out = torch.zeros(P, channels, dtype=DTYPE)
        out[:, 5 + num_classes] = 1.0
        return out

    mean = splats.projection.means2d[index]
    conic = splats.conic[index]
    dx = pixels[:, None, 0] - mean[None, :, 0]
    dy = pixels[:, None, 1] - mean[None, :, 1]
    power = conic[None, :, 0] * dx * dx + 2.0 * conic[None, :, 1] * dx * dy + conic[None, :, 2] * dy * dy
    alpha = splats.opacity[index][None, :] * torch.exp(-0.5 * power)
    keep = (power <= MAHALANOBIS_CUTOFF) & (alpha >= MIN_ALPHA)
    alpha = torch.where(keep, alpha, torch.zeros_like(alpha))

    shifted = torch.cat([torch.ones(P, 1, dtype=DTYPE), 1.0 - alpha[:, :-1]], dim=1)
    weights = alpha * torch.cumprod(shifted, dim=1)

    accum = weights.sum(dim=1, keepdim=True)
    norm = torch.clamp(accum, min=ALPHA_EPS)
    rgb = weights @ splats.colors[index]
    depth = (weights @ splats.projection.depth[index].reshape(-1, 1)) / norm
    instance = weights @ splats.onehot[index]
    background = instance[:, num_classes:] + (1.0 - accum)
    instance = torch.cat([instance[:, :num_classes], background], dim=1)
    flow = (weights @ splats.flow[index]) / norm
    return torch.cat([rgb, accum, depth, instance, flow], dim=1)


def _tiles(width: int, height: int, size: int) -> List[Tuple[int, int, int, int]]:
    return [(x0, y0, min(x0 + size, width), min(y0 + size, height))
            for y0 in range(0, height, size) for x0 in range(0, width, size)]


def render(scene: GaussianSet, cam: Camera, flow_targets: Optional[torch.Tensor] = None,
           num_classes: Optional[int] = None, flow_camera: Optional[Camera] = None,
           settings: Optional[RasterSettings] = None) -> RenderOutput:
    """
    Jointly splat every Gaussian of ``scene`` as seen from ``cam``.

    Args:
        scene: Composed Gaussians in one (frame-centric) coordinate system
        cam: Camera of the frame
        flow_targets: (N, 3) positions of the same Gaussians at the next frame
        num_classes: Number of foreground classes K (background = K)
        flow_camera: Camera of the next frame (defaults to ``cam``)
        settings: Tile size, worker threads and SH degree

    Returns:
        RenderOutput
    """
    settings = settings or RasterSettings()
    render_counter.calls += 1
    if num_classes is None:
        num_classes = int(scene.instance_label.max()) if len(scene) else 0
    H, W = cam.height, cam.width

    splats = prepare_splats(scene, cam, num_classes, flow_targets, flow_camera, settings.sh_degree)
    order = splats.order[splats.projection.visible[splats.order]]
    mean = splats.projection.means2d.detach()[order]
    radius = splats.radius[order]
    lo = mean - radius[:, None]
    hi = mean + radius[:, None]

    tiles = _tiles(W, H, settings.tile_size)
    grad_enabled = torch.is_grad_enabled()

    def run_tile(tile):
        x0, y0, x1, y1 = tile
        with torch.set_grad_enabled(grad_enabled):
            ys, xs = torch.meshgrid(torch.arange(y0, y1, dtype=DTYPE), torch.arange(x0, x1, dtype=DTYPE),
                                    indexing="ij")
            pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
            overlap = (lo[:, 0] <= x1 - 1) & (hi[:, 0] >= x0) & (lo[:, 1] <= y1 - 1) & (hi[:, 1] >= y0)
            return composite(pixels, splats, order[overlap], num_classes)

    if settings.threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(tile) for tile in tiles]

    flat_index = torch.cat([
        (torch.arange(y0, y1)[:, None] * W + torch.arange(x0, x1)[None, :]).reshape(-1)
        for x0, y0, x1, y1 in tiles
    ])
    packed = torch.cat(results, dim=0)
    image = torch.zeros(H * W, packed.shape[1], dtype=DTYPE).index_copy(0, flat_index, packed)
    image = image.reshape(H, W, -1)

    if order.numel() == 0:
        logger.debug("Render with no visible Gaussians")
    k1 = num_classes + 1
    return RenderOutput(
        rgb=image[..., 0:3],
        alpha=image[..., 3],
        depth=image[..., 4],
        instance=image[..., 5:5 + k1],
        flow=image[..., 5 + k1:7 + k1],
    )
