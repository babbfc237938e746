"""
Gaussian sets: the scene representation shared by every stage.
"""
from dataclasses import dataclass, fields, replace
from typing import Dict, Iterable, List, Optional, Sequence

import torch

from ..core.diffcore import DTYPE, param_tensor
from ..core.errors import MosplatError, ShapeMismatchError
from . import quaternion as quat
from .geometry import build_covariance, degree_from_count, rgb_to_sh_dc, sh_coeff_count

FLOAT_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


@dataclass
class GaussianSet:
    """
    Anisotropic 3D Gaussians of one object (or of a composed scene).

    Attributes:
        positions: (N, 3) centers
        log_scales: (N, 3) log standard deviations
        rotations: (N, 4) unit quaternions (w, x, y, z)
        opacity_logits: (N, 1) logits of the base opacity
        sh_coeffs: (N, (L+1)^2, 3) spherical-harmonics colour coefficients
        instance_label: (N,) int64 class in [0, K]; K is the background class
    """
    positions: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    sh_coeffs: torch.Tensor
    instance_label: torch.Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n, 1),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if tuple(value.shape) != shape:
                raise ShapeMismatchError(name, shape, value.shape)
        if self.sh_coeffs.dim() != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ShapeMismatchError("sh_coeffs", (n, "C", 3), self.sh_coeffs.shape)
        degree_from_count(self.sh_coeffs.shape[1])
        if tuple(self.instance_label.shape) != (n,):
            raise ShapeMismatchError("instance_label", (n,), self.instance_label.shape)
        if self.instance_label.dtype != torch.int64:
            self.instance_label = self.instance_label.to(torch.int64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return degree_from_count(self.sh_coeffs.shape[1])

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations, self.scales)

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianSet":
        return cls(
            positions=torch.zeros(0, 3, dtype=DTYPE),
            log_scales=torch.zeros(0, 3, dtype=DTYPE),
            rotations=torch.zeros(0, 4, dtype=DTYPE),
            opacity_logits=torch.zeros(0, 1, dtype=DTYPE),
            sh_coeffs=torch.zeros(0, sh_coeff_count(sh_degree), 3, dtype=DTYPE),
            instance_label=torch.zeros(0, dtype=torch.int64),
        )

    @classmethod
    def from_points(cls, positions: torch.Tensor, colors: torch.Tensor, scales: torch.Tensor,
                    opacity: float, label: int, sh_degree: int = 1,
                    rotations: Optional[torch.Tensor] = None) -> "GaussianSet":
        """
        Build a set from centers, RGB colours in [0, 1] and per-point scales.

        Args:
            positions: (N, 3)
            colors: (N, 3)
            scales: (N,) isotropic or (N, 3) anisotropic standard deviations
            opacity: Base opacity in (0, 1)
            label: Instance label for every Gaussian
            sh_degree: Stored spherical-harmonics degree
            rotations: Optional (N, 4) quaternions (identity by default)
        """
        positions = torch.as_tensor(positions, dtype=DTYPE)
        n = positions.shape[0]
        scales = torch.as_tensor(scales, dtype=DTYPE)
        if scales.dim() == 1:
            scales = scales.unsqueeze(-1).expand(n, 3)
        if not 0.0 < opacity < 1.0:
            raise MosplatError(f"Initial opacity must lie in (0, 1), got {opacity}")
        sh = torch.zeros(n, sh_coeff_count(sh_degree), 3, dtype=DTYPE)
        sh[:, 0] = rgb_to_sh_dc(torch.as_tensor(colors, dtype=DTYPE))
        logit = torch.logit(torch.tensor(opacity, dtype=DTYPE))
        return cls(
            positions=positions.clone(),
            log_scales=torch.log(scales).clone(),
            rotations=quat.identity(n) if rotations is None else quat.normalize(torch.as_tensor(rotations, dtype=DTYPE)),
            opacity_logits=logit.expand(n, 1).clone(),
            sh_coeffs=sh,
            instance_label=torch.full((n,), int(label), dtype=torch.int64),
        )

    def detach(self) -> "GaussianSet":
        return replace(self, **{name: getattr(self, name).detach().clone() for name in FLOAT_FIELDS},
                       instance_label=self.instance_label.clone())

    def as_parameters(self, trainable: Optional[Dict[str, bool]] = None) -> "GaussianSet":
        """
        Copy with every float field turned into a float64 parameter.

        Args:
            trainable: Per-field requires_grad (default: all trainable)
        """
        trainable = trainable or {}
        return replace(self, **{
            name: param_tensor(getattr(self, name).detach(), requires_grad=trainable.get(name, True))
            for name in FLOAT_FIELDS
        }, instance_label=self.instance_label.clone())

    def parameters(self) -> List[torch.Tensor]:
        return [getattr(self, name) for name in FLOAT_FIELDS if getattr(self, name).requires_grad]

    def named_fields(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def select(self, index: torch.Tensor) -> "GaussianSet":
        return GaussianSet(**{name: value[index] for name, value in self.named_fields().items()})

    def with_label(self, label: int) -> "GaussianSet":
        return replace(self, instance_label=torch.full_like(self.instance_label, int(label)))

    @staticmethod
    def concat(sets: Sequence["GaussianSet"]) -> "GaussianSet":
        """Compose sets into one scene (rows keep the input order)."""
        sets = [s for s in sets if s is not None]
        if not sets:
            raise MosplatError("Cannot compose an empty list of Gaussian sets")
        degree = max(s.sh_degree for s in sets)
        padded = [s.with_sh_degree(degree) for s in sets]
        return GaussianSet(**{
            name: torch.cat([getattr(s, name) for s in padded], dim=0)
            for name in [f.name for f in fields(GaussianSet)]
        })

    def with_sh_degree(self, degree: int) -> "GaussianSet":
        count = sh_coeff_count(degree)
        current = self.sh_coeffs.shape[1]
        if count == current:
            return self
        if count < current:
            sh = self.sh_coeffs[:, :count]
        else:
            pad = torch.zeros(len(self), count - current, 3, dtype=self.sh_coeffs.dtype)
            sh = torch.cat([self.sh_coeffs, pad], dim=1)
        return replace(self, sh_coeffs=sh)

    def translated(self, offset: torch.Tensor) -> "GaussianSet":
        return replace(self, positions=self.positions + offset)

    @torch.no_grad()
    def renormalize_(self):
        """Renormalize quaternions in place (after an optimizer update)."""
        norms = torch.linalg.norm(self.rotations, dim=-1, keepdim=True).clamp_min(1e-12)
        self.rotations.div_(norms)


def recenter_median(gaussians: GaussianSet) -> GaussianSet:
    """
    Translate so that the per-coordinate median of the centers is the origin.

    Even counts use the midpoint of the two central values.
    """
    if len(gaussians) == 0:
        raise MosplatError("Cannot recenter an empty Gaussian set")
    median = torch.quantile(gaussians.positions.detach(), 0.5, dim=0)
    return gaussians.translated(-median)


def concat_labels(sets: Iterable[GaussianSet]) -> torch.Tensor:
    return torch.cat([s.instance_label for s in sets])
