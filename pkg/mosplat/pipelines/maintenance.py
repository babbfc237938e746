"""
Periodic pruning and densification of a Gaussian set.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from loguru import logger

from ..config import StageConfig
from ..core.diffcore import AdamW, param_tensor
from ..models import quaternion as quat
from ..models.gaussians import FLOAT_FIELDS, GaussianSet


@dataclass
class MaintenanceReport:
    before: int
    pruned: int
    split: int
    added: int
    after: int
    densify_skipped: bool = False


def prune_mask(gaussians: GaussianSet, cfg: StageConfig) -> torch.Tensor:
    """Opacity below ``prune_opacity`` or largest scale above ``prune_scale``."""
    with torch.no_grad():
        opacity = gaussians.opacity[:, 0]
        max_scale = gaussians.scales.amax(dim=-1)
        return (opacity < cfg.prune_opacity) | (max_scale > cfg.prune_scale)


def densify_mask(gaussians: GaussianSet, grad_accum: torch.Tensor, cfg: StageConfig) -> torch.Tensor:
    """Accumulated gradient above ``densify_grad`` and largest scale below ``densify_max_scale``."""
    with torch.no_grad():
        max_scale = gaussians.scales.amax(dim=-1)
        return (grad_accum > cfg.densify_grad) & (max_scale < cfg.densify_max_scale)


def prune_and_densify(gaussians: GaussianSet, grad_accum: torch.Tensor, cfg: StageConfig,
                      optimizer: Optional[AdamW] = None,
                      generator: Optional[torch.Generator] = None) -> Tuple[GaussianSet, MaintenanceReport]:
    """
    Remove weak or oversized Gaussians and split high-gradient ones.

    A Gaussian is never both pruned and split. Densification only runs while
    the set is below ``gaussian_cap``, and the number of splits is limited so
    the result stays within the cap. Opacities are never reset.

    Args:
        gaussians: Parameter set (as returned by ``as_parameters``)
        grad_accum: (N,) accumulated position-gradient norms
        cfg: Thresholds and split constants
        optimizer: AdamW holding the fields; its moments follow the surviving rows
        generator: Source of the children's position jitter

    Returns:
        (updated parameter set, report)
    """
    n = len(gaussians)
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    pruned = prune_mask(gaussians, cfg)
    candidates = densify_mask(gaussians, grad_accum, cfg) & ~pruned

    survivors = n - int(pruned.sum())
    children = cfg.split_children
    skipped = n >= cfg.gaussian_cap
    if skipped:
        split_index = torch.zeros(0, dtype=torch.int64)
    else:
        room = max(cfg.gaussian_cap - survivors, 0) // (children - 1)
        ranked = torch.nonzero(candidates).reshape(-1)
        if ranked.numel() > room:
            order = torch.argsort(-grad_accum[ranked], stable=True)
            ranked = torch.sort(ranked[order[:room]]).values
        split_index = ranked

    removed = pruned.clone()
    removed[split_index] = True
    keep_index = torch.nonzero(~removed).reshape(-1)

    with torch.no_grad():
        new_rows = {}
        if split_index.numel():
            parents = gaussians.select(split_index).detach()
            stds = parents.scales.repeat(children, 1)
            samples = torch.normal(torch.zeros_like(stds), stds, generator=generator)
            rot = quat.to_matrix(parents.rotations).repeat(children, 1, 1)
            new_rows["positions"] = torch.bmm(rot, samples.unsqueeze(-1)).squeeze(-1) \
                + parents.positions.repeat(children, 1)
            new_rows["log_scales"] = parents.log_scales.repeat(children, 1) - torch.log(
                torch.tensor(cfg.split_scale_factor, dtype=parents.log_scales.dtype))
            new_rows["rotations"] = parents.rotations.repeat(children, 1)
            new_rows["opacity_logits"] = parents.opacity_logits.repeat(children, 1)
            new_rows["sh_coeffs"] = parents.sh_coeffs.repeat(children, 1, 1)
            labels = torch.cat([gaussians.instance_label[keep_index],
                                gaussians.instance_label[split_index].repeat(children)])
        else:
            labels = gaussians.instance_label[keep_index]

        appended = split_index.numel() * children
        fields = {}
        for name in FLOAT_FIELDS:
            old = getattr(gaussians, name)
            values = old.detach()[keep_index]
            if appended:
                values = torch.cat([values, new_rows[name]], dim=0)
            new = param_tensor(values, requires_grad=old.requires_grad)
            if optimizer is not None and old.requires_grad:
                optimizer.replace(old, new, keep_index, appended)
            fields[name] = new

    updated = GaussianSet(**fields, instance_label=labels)
    report = MaintenanceReport(before=n, pruned=int(pruned.sum()), split=int(split_index.numel()),
                               added=appended, after=len(updated), densify_skipped=skipped)
    logger.debug(f"Maintenance: {report.before} -> {report.after} Gaussians "
                 f"(pruned {report.pruned}, split {report.split})")
    return updated, report
