"""
Per-object spatiotemporal deformation field.

A factored grid (six planes over the coordinate pairs of (x, y, z, t), fused by
elementwise product) feeds small heads that predict motion-basis weights and
time-varying rotation, scale and SH adjustments. Displacements are convex
combinations of shared translation bases anchored at frame 0.
"""
import itertools
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import DeformerSettings
from ..core.diffcore import DTYPE
from ..core.errors import MosplatError, ShapeMismatchError
from . import quaternion as quat
from .gaussians import GaussianSet
from .geometry import sh_coeff_count

SECTION_VERSION = 1


@dataclass
class DeformationVector:
    """Batched per-Gaussian deformation at one frame."""
    delta_mu: torch.Tensor         # (N, 3)
    delta_rot: torch.Tensor        # (N, 4) unit quaternion
    delta_log_scale: torch.Tensor  # (N, 3)
    delta_sh: torch.Tensor         # (N, C, 3)

    def __len__(self) -> int:
        return self.delta_mu.shape[0]

    @classmethod
    def identity(cls, n: int, sh_count: int) -> "DeformationVector":
        return cls(
            delta_mu=torch.zeros(n, 3, dtype=DTYPE),
            delta_rot=quat.identity(n),
            delta_log_scale=torch.zeros(n, 3, dtype=DTYPE),
            delta_sh=torch.zeros(n, sh_count, 3, dtype=DTYPE),
        )


class FactoredGrid(nn.Module):
    """
    Six feature planes over {xy, xz, xt, yz, yt, zt}.

    Inputs are normalized to [0, 1]; queries outside clamp to the border.
    Spatial planes start at 1 plus small uniform noise, time planes at exactly 1.
    """

    def __init__(self, spatial_resolution: int, time_resolution: int, features: int,
                 plane_noise: float = 0.1, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.resolution = (spatial_resolution,) * 3 + (time_resolution,)
        self.features = features
        self.combos = list(itertools.combinations(range(4), 2))
        self.planes = nn.ParameterList()
        for a, b in self.combos:
            shape = (1, features, self.resolution[b], self.resolution[a])
            plane = torch.ones(shape, dtype=DTYPE)
            if b != 3 and plane_noise > 0:
                plane = plane + plane_noise * (2.0 * torch.rand(shape, generator=generator, dtype=DTYPE) - 1.0)
            self.planes.append(nn.Parameter(plane))

    def forward(self, x: torch.Tensor, t: torch.Tensor, spatial_only: bool = False) -> torch.Tensor:
        """
        Args:
            x: (N, 3) normalized positions in [0, 1]
            t: (N,) normalized times in [0, 1]
            spatial_only: Fuse only the three planes without a time axis

        Returns:
            (N, F) fused features
        """
        coords = torch.cat([x, t.reshape(-1, 1)], dim=-1) * 2.0 - 1.0
        out = torch.ones(coords.shape[0], self.features, dtype=coords.dtype)
        for plane, (a, b) in zip(self.planes, self.combos):
            if spatial_only and b == 3:
                continue
            grid = coords[:, [a, b]].reshape(1, 1, -1, 2)
            sample = F.grid_sample(plane, grid, mode="bilinear", padding_mode="border", align_corners=True)
            out = out * sample.reshape(self.features, -1).T
        return out

    def node_position(self, axis: int, index: int) -> float:
        """Normalized coordinate of grid node ``index`` along ``axis``."""
        return index / (self.resolution[axis] - 1)


def query_features(grid: FactoredGrid, x: torch.Tensor, t) -> torch.Tensor:
    """Fused feature(s) at normalized position(s) ``x`` and time ``t``."""
    single = x.dim() == 1
    x = x.reshape(-1, 3)
    t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
    out = grid(x, t)
    return out[0] if single else out


def _mlp(in_dim: int, width: int, layers: int, out_dim: int, out_init_std: float = 0.0,
         generator: Optional[torch.Generator] = None) -> nn.Sequential:
    modules = []
    dim = in_dim
    for _ in range(layers):
        linear = nn.Linear(dim, width, dtype=DTYPE)
        bound = 1.0 / np.sqrt(dim)
        with torch.no_grad():
            linear.weight.copy_((2 * torch.rand(linear.weight.shape, generator=generator, dtype=DTYPE) - 1) * bound)
            linear.bias.copy_((2 * torch.rand(linear.bias.shape, generator=generator, dtype=DTYPE) - 1) * bound)
        modules += [linear, nn.SiLU()]
        dim = width
    head = nn.Linear(dim, out_dim, dtype=DTYPE)
    with torch.no_grad():
        head.weight.copy_(out_init_std * torch.randn(head.weight.shape, generator=generator, dtype=DTYPE))
        head.bias.zero_()
    modules.append(head)
    return nn.Sequential(*modules)


class MotionBasisBank(nn.Module):
    """B translation trajectories; T_b(0) is pinned to zero."""

    def __init__(self, num_bases: int, num_frames: int):
        super().__init__()
        if num_frames < 1:
            raise MosplatError("A motion basis bank needs at least one frame")
        self.num_bases = num_bases
        self.num_frames = num_frames
        self.free = nn.Parameter(torch.zeros(num_bases, num_frames - 1, 3, dtype=DTYPE))

    def trajectories(self) -> torch.Tensor:
        """(B, T, 3) with frame 0 identically zero."""
        anchor = torch.zeros(self.num_bases, 1, 3, dtype=self.free.dtype)
        return torch.cat([anchor, self.free], dim=1)

    def at(self, t: int) -> torch.Tensor:
        if t == 0:
            return torch.zeros(self.num_bases, 3, dtype=self.free.dtype)
        return self.free[:, t - 1]


class HeadSet(nn.Module):
    """Heads mapping grid features to weight logits, rotation, scale and SH changes."""

    def __init__(self, features: int, num_bases: int, sh_count: int, width: int = 64, layers: int = 2,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.sh_count = sh_count
        # Weight logits get a small random output layer so the bases receive distinct gradients.
        self.weights = _mlp(features, width, layers, num_bases, out_init_std=1e-1, generator=generator)
        self.rotation = _mlp(features, width, layers, 4, generator=generator)
        self.scale = _mlp(features, width, layers, 3, generator=generator)
        self.sh = _mlp(features, width, layers, sh_count * 3, generator=generator)

    def dynamic(self, feats: torch.Tensor):
        return self.rotation(feats), self.scale(feats), self.sh(feats).reshape(-1, self.sh_count, 3)


class DeformationField(nn.Module):
    """
    Deformation field of one object.

    The canonical bounding sphere (center, radius) fixes the normalized
    domain at construction and never moves afterwards.
    """

    def __init__(self, canonical: GaussianSet, num_frames: int, settings: Optional[DeformerSettings] = None,
                 seed: int = 0, center: Optional[torch.Tensor] = None, radius: Optional[float] = None):
        super().__init__()
        settings = settings or DeformerSettings()
        self.settings = settings
        self.num_frames = num_frames
        self.sh_count = sh_coeff_count(canonical.sh_degree)
        generator = torch.Generator().manual_seed(seed)

        positions = canonical.positions.detach()
        if center is None:
            center = (positions.amax(0) + positions.amin(0)) / 2 if len(canonical) else torch.zeros(3, dtype=DTYPE)
        if radius is None:
            radius = float(torch.linalg.norm(positions - center, dim=-1).max()) if len(canonical) else 1.0
        self.register_buffer("center", torch.as_tensor(center, dtype=DTYPE).clone())
        self.register_buffer("radius", torch.tensor(max(float(radius), 1e-6), dtype=DTYPE))

        time_resolution = max(2, int(np.ceil(settings.time_resolution_factor * num_frames)))
        self.grid = FactoredGrid(settings.spatial_resolution, time_resolution, settings.features,
                                 settings.plane_noise, generator)
        self.bases = MotionBasisBank(settings.num_bases, num_frames)
        self.heads = HeadSet(settings.features, settings.num_bases, self.sh_count,
                             settings.head_width, settings.head_layers, generator)

    def normalize_positions(self, positions: torch.Tensor) -> torch.Tensor:
        return (positions - self.center) / (2.0 * self.radius) + 0.5

    def normalize_time(self, t: int) -> float:
        return t / max(self.num_frames - 1, 1)

    def basis_weights(self, canonical: GaussianSet) -> torch.Tensor:
        """(N, B) softmax weights, queried at the canonical positions only."""
        x = self.normalize_positions(canonical.positions)
        feats = self.grid(x, torch.zeros(x.shape[0], dtype=x.dtype), spatial_only=True)
        return torch.softmax(self.heads.weights(feats), dim=-1)

    def parameter_groups(self) -> Dict[str, list]:
        return {
            "grid": list(self.grid.parameters()),
            "heads": list(self.heads.parameters()) + list(self.bases.parameters()),
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        arrays["meta.shape"] = np.array([
            self.num_frames, self.sh_count, self.settings.num_bases, self.settings.features,
            self.settings.spatial_resolution, self.settings.head_width, self.settings.head_layers,
        ], dtype=np.int64)
        arrays["meta.time_factor"] = np.array([self.settings.time_resolution_factor], dtype=np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "DeformationField":
        num_frames, sh_count, bases, features, spatial, width, layers = (int(v) for v in arrays["meta.shape"])
        settings = DeformerSettings(
            num_bases=bases, features=features, spatial_resolution=spatial,
            time_resolution_factor=float(arrays["meta.time_factor"][0]), head_width=width, head_layers=layers,
        )
        degree = int(round(np.sqrt(sh_count))) - 1
        placeholder = GaussianSet.empty(degree)
        field = cls(placeholder, num_frames, settings)
        state = {k[len("param."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param.")}
        field.load_state_dict(state)
        return field


def deform(field: DeformationField, canonical: GaussianSet, t: int) -> DeformationVector:
    """
    Deformation of every canonical Gaussian at frame ``t``.

    Frame 0 is the identity by construction: bases are anchored at zero and
    the heads' frame-0 outputs are subtracted as a calibration offset.
    """
    if not 0 <= t < field.num_frames:
        raise MosplatError(f"Frame {t} outside [0, {field.num_frames})")
    n = len(canonical)
    if canonical.sh_coeffs.shape[1] != field.sh_count:
        raise ShapeMismatchError("sh_coeffs", (n, field.sh_count, 3), canonical.sh_coeffs.shape)
    if t == 0 or n == 0:
        return DeformationVector.identity(n, field.sh_count)

    weights = field.basis_weights(canonical)
    delta_mu = weights @ field.bases.at(t)

    x = field.normalize_positions(canonical.positions)
    times = torch.full((n,), field.normalize_time(t), dtype=x.dtype)
    rot_t, scale_t, sh_t = field.heads.dynamic(field.grid(x, times))
    rot_0, scale_0, sh_0 = field.heads.dynamic(field.grid(x, torch.zeros_like(times)))

    raw_rot = rot_t - rot_0
    delta_rot = quat.normalize(quat.identity(n, dtype=raw_rot.dtype) + raw_rot)
    return DeformationVector(delta_mu, delta_rot, scale_t - scale_0, sh_t - sh_0)


def apply_deformation(gaussians: GaussianSet, deformation: DeformationVector) -> GaussianSet:
    """Deformed copy; opacity and labels are carried over untouched."""
    if len(deformation) != len(gaussians):
        raise ShapeMismatchError("deformation", (len(gaussians),), (len(deformation),))
    # to_matrix renormalizes; an identity delta leaves the rotations bit-exact
    rotations = quat.multiply(deformation.delta_rot, gaussians.rotations)
    return GaussianSet(
        positions=gaussians.positions + deformation.delta_mu,
        log_scales=gaussians.log_scales + deformation.delta_log_scale,
        rotations=rotations,
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs + deformation.delta_sh,
        instance_label=gaussians.instance_label,
    )


def sh_l1(delta_sh: torch.Tensor) -> torch.Tensor:
    if delta_sh.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return delta_sh.abs().mean()


def sh_adjust_l1(field: DeformationField, canonical: GaussianSet, t: int) -> torch.Tensor:
    """Mean absolute SH adjustment at frame ``t``."""
    return sh_l1(deform(field, canonical, t).delta_sh)
