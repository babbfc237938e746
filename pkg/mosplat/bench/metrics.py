"""
Tracking and image metrics.

Track errors are L2 distances in pixels of a 256x256-normalized image; tracks
are matched by id, so ordering and consistent relabelling do not matter.
"""
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from ..core.errors import MosplatError, ShapeMismatchError
from ..schemas.run_metrics import TrackMetrics
from .tracks import TrackSet

NORMALIZED_SIZE = 256.0
PSNR_CAP = 99.0


def _errors(pred: TrackSet, gt: TrackSet, width: int, height: int,
            include_occluded: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample normalized L2 errors (N, T) and the mask of samples to count."""
    if set(pred.ids) != set(gt.ids):
        missing = sorted(set(gt.ids) - set(pred.ids))
        extra = sorted(set(pred.ids) - set(gt.ids))
        raise MosplatError(f"Track ids differ: missing {missing}, unexpected {extra}")
    if pred.num_frames != gt.num_frames:
        raise ShapeMismatchError("track frames", (gt.num_frames,), (pred.num_frames,))
    scale = np.array([NORMALIZED_SIZE / width, NORMALIZED_SIZE / height])
    errors = np.linalg.norm((pred.uv() - gt.uv()) * scale, axis=-1)
    counted = np.ones_like(errors, dtype=bool) if include_occluded else gt.visibility()
    return errors, counted


def _pick(errors: np.ndarray, counted: np.ndarray, what: str) -> np.ndarray:
    samples = errors[counted]
    if samples.size == 0 and errors.size:
        logger.warning(f"No ground-truth-visible samples for {what}; counting occluded samples")
        samples = errors.reshape(-1)
    return samples


def metric_trajectory(pred: TrackSet, gt: TrackSet, width: int, height: int,
                      include_occluded: bool = False) -> Dict[str, float]:
    """ATE (mean) and MTE (median) over every point and timestep."""
    errors, counted = _errors(pred, gt, width, height, include_occluded)
    samples = _pick(errors, counted, "ATE/MTE")
    if samples.size == 0:
        return {"ate": 0.0, "mte": 0.0}
    return {"ate": float(samples.mean()), "mte": float(np.median(samples))}


def metric_endpoint(pred: TrackSet, gt: TrackSet, width: int, height: int,
                    include_occluded: bool = False) -> Dict[str, float]:
    """A-EPE (mean) and M-EPE (median) at the final timestep."""
    errors, counted = _errors(pred, gt, width, height, include_occluded)
    if errors.size == 0:
        return {"a_epe": 0.0, "m_epe": 0.0}
    samples = _pick(errors[:, -1:], counted[:, -1:], "A-EPE/M-EPE")
    return {"a_epe": float(samples.mean()), "m_epe": float(np.median(samples))}


def evaluate_tracks(pred: TrackSet, gt: TrackSet, width: int, height: int,
                    include_occluded: bool = False) -> TrackMetrics:
    return TrackMetrics(
        **metric_trajectory(pred, gt, width, height, include_occluded),
        **metric_endpoint(pred, gt, width, height, include_occluded),
        num_tracks=len(gt),
        include_occluded=include_occluded,
    )


def metric_psnr(render: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB, capped at 99 (identical images)."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ShapeMismatchError("psnr inputs", target.shape, render.shape)
    mse = float(((render - target) ** 2).mean())
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def metric_psnr_masked(render: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray]) -> float:
    """PSNR over the pixels where ``mask`` is set (every pixel when None)."""
    if mask is None:
        return metric_psnr(render, target)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return PSNR_CAP
    return metric_psnr(np.asarray(render)[mask], np.asarray(target)[mask])
