"""
Optimization objectives and the novel-view prior interface.
"""
from .losses import (
    LossBreakdown,
    flow_valid_mask,
    loss_class,
    loss_depth,
    loss_flow,
    loss_rgb,
    ssim,
    total_loss,
)
from .priors import PriorGradient, PriorProvider, SyntheticPrior, apply_prior, sample_taus
from .rigidity import NeighborGraph, build_neighbor_graph, loss_rigid

__all__ = [
    "LossBreakdown", "flow_valid_mask", "loss_class", "loss_depth", "loss_flow", "loss_rgb", "ssim",
    "total_loss", "PriorGradient", "PriorProvider", "SyntheticPrior", "apply_prior", "sample_taus",
    "NeighborGraph", "build_neighbor_graph", "loss_rigid",
]
