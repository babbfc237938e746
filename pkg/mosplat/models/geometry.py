"""
Covariance construction, perspective projection and spherical harmonics.
"""
from dataclasses import dataclass
from typing import Tuple

import torch

from ..core.errors import MosplatError
from . import quaternion as quat
from .camera import Camera

NEAR_PLANE = 1e-3
LOW_PASS = 0.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def build_covariance(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """
    Sigma = R diag(s^2) R^T.

    Args:
        q: (..., 4) quaternions, renormalized here
        s: (..., 3) strictly positive scales

    Returns:
        (..., 3, 3) symmetric PSD covariances
    """
    if bool((s <= 0).any()):
        raise MosplatError("Gaussian scales must be strictly positive")
    R = quat.to_matrix(q)
    RS = R * s.unsqueeze(-2)
    return RS @ RS.transpose(-1, -2)


@dataclass
class Projection:
    """Screen-space footprint of a batch of Gaussians."""
    means2d: torch.Tensor   # (N, 2) pixels
    cov2d: torch.Tensor     # (N, 2, 2) pixels^2, low-pass included
    depth: torch.Tensor     # (N,) camera z
    visible: torch.Tensor   # (N,) bool, False when culled by the near plane


def project_gaussians(positions: torch.Tensor, cov3d: torch.Tensor, cam: Camera,
                      low_pass: float = LOW_PASS, near: float = NEAR_PLANE) -> Projection:
    """
    Perspective projection with the first-order (EWA) covariance linearization.

    Culled Gaussians get a dummy depth of 1 so no NaN/Inf enters the graph.
    """
    W = cam.rotation
    p_cam = cam.to_camera(positions)
    x, y, z = p_cam.unbind(-1)
    visible = z > near
    z_safe = torch.where(visible, z, torch.ones_like(z))

    u = cam.fx * x / z_safe + cam.cx
    v = cam.fy * y / z_safe + cam.cy
    zeros = torch.zeros_like(z_safe)
    J = torch.stack([
        torch.stack([cam.fx / z_safe, zeros, -cam.fx * x / (z_safe * z_safe)], dim=-1),
        torch.stack([zeros, cam.fy / z_safe, -cam.fy * y / (z_safe * z_safe)], dim=-1),
    ], dim=-2)
    T = J @ W
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    cov2d = cov2d + low_pass * torch.eye(2, dtype=cov2d.dtype)
    return Projection(torch.stack([u, v], dim=-1), cov2d, z_safe, visible)


def project_gaussian(position: torch.Tensor, q: torch.Tensor, s: torch.Tensor,
                     cam: Camera) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool]:
    """
    Project a single Gaussian.

    Returns:
        (u, cov2d, z, culled)
    """
    cov = build_covariance(q.reshape(1, 4), s.reshape(1, 3))
    proj = project_gaussians(position.reshape(1, 3), cov, cam)
    return proj.means2d[0], proj.cov2d[0], proj.depth[0], not bool(proj.visible[0])


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_count(count: int) -> int:
    degree = int(round(count ** 0.5)) - 1
    if (degree + 1) ** 2 != count:
        raise MosplatError(f"{count} is not a valid spherical-harmonics coefficient count")
    return degree


def evaluate_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """
    Evaluate real spherical harmonics.

    Args:
        sh: (N, (L+1)^2, 3) coefficients
        dirs: (N, 3) unit viewing directions
        degree: Highest band to use (<= 3, <= stored degree)

    Returns:
        (N, 3) raw colour (before the +0.5 offset)
    """
    if degree > 3:
        raise MosplatError(f"Spherical harmonics above degree 3 are not supported (got {degree})")
    result = SH_C0 * sh[:, 0]
    if degree < 1:
        return result
    x, y, z = (dirs[:, i:i + 1] for i in range(3))
    result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (result
              + SH_C2[0] * xy * sh[:, 4]
              + SH_C2[1] * yz * sh[:, 5]
              + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
              + SH_C2[3] * xz * sh[:, 7]
              + SH_C2[4] * (xx - yy) * sh[:, 8])
    if degree < 3:
        return result
    return (result
            + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
            + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14]
            + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    return (rgb - 0.5) / SH_C0


def sh_dc_to_rgb(dc: torch.Tensor) -> torch.Tensor:
    return dc * SH_C0 + 0.5
