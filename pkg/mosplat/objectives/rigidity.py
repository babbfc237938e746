"""
Local rigidity regularizer over a fixed k-NN graph of canonical Gaussians.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from ..core.diffcore import DTYPE
from ..models import quaternion as quat
from ..models.gaussians import GaussianSet


@dataclass
class NeighborGraph:
    """Unique undirected edges (i < j) with Gaussian distance weights."""
    edges: torch.Tensor    # (E, 2) int64
    weights: torch.Tensor  # (E,)
    sigma: float

    def __len__(self) -> int:
        return self.edges.shape[0]


def build_neighbor_graph(positions: torch.Tensor, k: int = 8, sigma: Optional[float] = None) -> NeighborGraph:
    """
    k-NN graph over canonical positions.

    With fewer than k + 1 points every other point is a neighbour. ``sigma``
    defaults to the median neighbour distance.
    """
    points = positions.detach().cpu().numpy()
    n = len(points)
    if n < 2:
        return NeighborGraph(torch.zeros(0, 2, dtype=torch.int64), torch.zeros(0, dtype=DTYPE), 1.0)
    k_eff = min(k, n - 1)
    distances, neighbors = cKDTree(points).query(points, k=k_eff + 1)
    distances, neighbors = distances[:, 1:], neighbors[:, 1:]

    rows = np.repeat(np.arange(n), k_eff)
    cols = neighbors.reshape(-1)
    pairs = np.unique(np.sort(np.stack([rows, cols], axis=1), axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]

    if sigma is None:
        sigma = float(np.median(distances))
    if sigma <= 0:
        sigma = 1.0
    d = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    weights = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    return NeighborGraph(torch.from_numpy(pairs.astype(np.int64)), torch.from_numpy(weights).to(DTYPE), sigma)


def _edge_length(positions: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    diff = positions[edges[:, 0]] - positions[edges[:, 1]]
    return torch.sqrt((diff * diff).sum(-1) + 1e-24)


def loss_rigid(canonical: GaussianSet, deformed: GaussianSet, graph: NeighborGraph,
               lambda_rot: float = 0.5) -> torch.Tensor:
    """
    Sum over edges of w_ij * [(|mu_i(t) - mu_j(t)| - |mu_i(0) - mu_j(0)|)^2
    + lambda_rot * d_q(R_i(t) R_i(0)^-1, R_j(t) R_j(0)^-1)^2].
    """
    if len(graph) == 0:
        return torch.zeros((), dtype=DTYPE)
    edges = graph.edges
    stretch = _edge_length(deformed.positions, edges) - _edge_length(canonical.positions, edges)
    total = (graph.weights * stretch * stretch).sum()
    if lambda_rot == 0:
        return total
    relative = quat.multiply(quat.normalize(deformed.rotations), quat.conjugate(quat.normalize(canonical.rotations)))
    angle = quat.geodesic_distance(relative[edges[:, 0]], relative[edges[:, 1]])
    return total + lambda_rot * (graph.weights * angle * angle).sum()
