"""
Novel-view prior interface.

A provider turns a rendered novel view into a per-pixel gradient image of the
form ``w(tau) * residual``. The engine applies it through a surrogate whose
derivative with respect to the render is exactly that gradient.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..core.diffcore import DTYPE
from ..core.errors import ShapeMismatchError


@dataclass
class PriorGradient:
    gradient: np.ndarray  # (H, W, 3)
    weight: float


class PriorProvider(ABC):
    """Source of novel-view gradients."""

    @abstractmethod
    def query(self, render: np.ndarray, pose: np.ndarray, reference: Optional[np.ndarray],
              tau: float) -> PriorGradient:
        """
        Args:
            render: (H, W, 3) rendered novel view in [0, 1]
            pose: 4x4 world_to_cam of the novel view (object-centric coordinates)
            reference: (H, W, 3) reference crop, or None
            tau: Noise level in [0, 1]
        """

    def close(self):
        pass


def uniform_weight(tau: float) -> float:
    return 1.0


class SyntheticPrior(PriorProvider):
    """
    Oracle prior over known ground-truth views.

    Returns ``w(tau) * (render - gt)`` for the ground-truth view whose pose is
    nearest (Frobenius distance) to the queried pose.
    """

    def __init__(self, views: Sequence[Tuple[np.ndarray, np.ndarray]],
                 weight_fn: Callable[[float], float] = uniform_weight):
        if not views:
            raise ValueError("SyntheticPrior needs at least one ground-truth view")
        self.poses = np.stack([np.asarray(p, dtype=np.float64).reshape(4, 4) for p, _ in views])
        self.images = [np.asarray(img, dtype=np.float64) for _, img in views]
        self.weight_fn = weight_fn

    def nearest(self, pose: np.ndarray) -> int:
        diff = self.poses - np.asarray(pose, dtype=np.float64).reshape(1, 4, 4)
        return int(np.argmin((diff ** 2).sum(axis=(1, 2))))

    def query(self, render, pose, reference, tau) -> PriorGradient:
        gt = self.images[self.nearest(pose)]
        render = np.asarray(render, dtype=np.float64)
        if render.shape != gt.shape:
            raise ShapeMismatchError("prior render", gt.shape, render.shape)
        weight = float(self.weight_fn(tau))
        return PriorGradient(weight * (render - gt), weight)


def apply_prior(rgb: torch.Tensor, gradient: np.ndarray) -> torch.Tensor:
    """
    Surrogate scalar whose gradient w.r.t. ``rgb`` is ``gradient / (H * W)``.

    The per-pixel normalization keeps the prior on the scale of the mean
    image losses.
    """
    grad = torch.as_tensor(gradient, dtype=DTYPE)
    if tuple(grad.shape) != tuple(rgb.shape):
        raise ShapeMismatchError("prior gradient", rgb.shape, grad.shape)
    pixels = rgb.shape[0] * rgb.shape[1]
    return (grad.detach() * rgb).sum() / pixels


def sample_taus(rng: np.random.Generator, count: int, tau_min: float, tau_max: float) -> List[float]:
    return [float(v) for v in rng.uniform(tau_min, tau_max, size=count)]
