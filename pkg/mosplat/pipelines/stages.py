"""
Two-stage orchestration over an ingested dataset: static lifting of every
object plus the background pre-fit, then the joint dynamic fit.
"""
import shlex
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from ..bench.dataset import VideoDataset
from ..bench.metrics import metric_psnr
from ..bridge.transforms import CropCamera, ObjectTrajectory, crop_object, init_transforms
from ..clients.prior_client import ExternalPrior, load_prior_views
from ..config import StageConfig
from ..core.errors import DatasetError, MosplatError
from ..models.deformer import DeformationField
from ..models.gaussians import GaussianSet
from ..objectives.priors import PriorProvider, SyntheticPrior
from ..render.novel_view import PROTOCOL_ANGLES, orbit_camera
from ..render.rasterizer import render
from .dynamic_fit import DynamicFitResult, compose_scene, deform_object, dynamic_fit
from .initialization import fit_background, init_background, init_object_gaussians
from .run_dir import FittedModel
from .static_lift import StaticLiftResult, static_lift

PRIOR_MODES = ("none", "oracle", "external")


@dataclass
class LiftReport:
    lifts: List[StaticLiftResult] = field(default_factory=list)
    background_losses: List[float] = field(default_factory=list)


def reference_crop(dataset: VideoDataset, trajectory: ObjectTrajectory, t: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Object-centric crop of frame ``t`` and its mask under the object's current transform."""
    transform = trajectory.frame_transform(t)
    o = trajectory.object_id
    return crop_object(dataset.frames[t], dataset.masks[o, t], transform.sigma, transform.tau, trajectory.crop.size)


def open_priors(dataset: VideoDataset, mode: str, command: Optional[str] = None) -> List[Optional[PriorProvider]]:
    """
    One prior provider per object.

    ``oracle`` serves the dataset's saved ground-truth views in process;
    ``external`` spawns ``command`` per object with ``{views}`` replaced by the
    object's view file (default: the bundled provider over a pipe).
    """
    if mode not in PRIOR_MODES:
        raise MosplatError(f"Unknown prior mode '{mode}' (expected one of {', '.join(PRIOR_MODES)})")
    if mode == "none":
        return [None] * dataset.num_objects
    missing = [o for o in range(dataset.num_objects) if o not in dataset.prior_views]
    if missing:
        raise DatasetError(f"Prior views missing for objects {missing}", [dataset.root / "prior"])
    if mode == "oracle":
        return [SyntheticPrior(load_prior_views(dataset.prior_views[o])) for o in range(dataset.num_objects)]
    template = command or f"{shlex.quote(sys.executable)} -m mosplat.clients.prior_client --views {{views}}"
    return [ExternalPrior.spawn(shlex.split(template.replace("{views}", shlex.quote(str(dataset.prior_views[o])))))
            for o in range(dataset.num_objects)]


def close_priors(priors: Sequence[Optional[PriorProvider]]):
    for prior in priors:
        if prior is not None:
            prior.close()


def lift_scene(dataset: VideoDataset, cfg: StageConfig,
               priors: Optional[Sequence[Optional[PriorProvider]]] = None) -> Tuple[FittedModel, LiftReport]:
    """
    Static stage: initialize transforms, lift every object from its first-frame
    crop and pre-fit the background.

    Raises:
        ObjectAbsent: when an object has no mask pixels in the first frame
    """
    num_objects = dataset.num_objects
    priors = list(priors) if priors is not None else [None] * num_objects
    crop = CropCamera(size=cfg.crop_size)
    trajectories = init_transforms(dataset.masks, dataset.depth, crop, cfg.crop_fill,
                                   reference_seed=cfg.reference_seed)
    cam0 = dataset.cameras[0]
    frame0, depth0 = dataset.frames[0], dataset.depth[0]
    report = LiftReport()

    objects = []
    for o in range(num_objects):
        logger.info(f"Lifting object {o + 1}/{num_objects}")
        seeds = init_object_gaussians(frame0, dataset.masks[o, 0], depth0, cam0, cfg.init_count, label=o,
                                      opacity=cfg.init_opacity, sh_degree=cfg.sh_degree, seed=cfg.seed + o)
        with torch.no_grad():
            local = trajectories[o].unlift(seeds, 0, cam0)
        crop_rgb, crop_mask = reference_crop(dataset, trajectories[o])
        result = static_lift(local, crop_rgb, crop_mask, priors[o], cfg, crop)
        report.lifts.append(result)
        objects.append(result.gaussians.with_label(o))

    background_mask = ~dataset.masks[:, 0].any(axis=0)
    background = init_background(frame0, background_mask, depth0, cam0, num_objects, cfg.background_count,
                                 cfg.init_opacity, cfg.sh_degree, seed=cfg.seed + num_objects)
    report.background_losses = fit_background(background, frame0, background_mask, cam0, cfg)
    return FittedModel(objects, background, trajectories), report


def reference_crops(dataset: VideoDataset, trajectories: Sequence[ObjectTrajectory]) -> List[np.ndarray]:
    return [reference_crop(dataset, trajectory)[0] for trajectory in trajectories]


def fit_scene(model: FittedModel, dataset: VideoDataset, cfg: StageConfig,
              priors: Optional[Sequence[Optional[PriorProvider]]] = None,
              steps: Optional[int] = None) -> Tuple[FittedModel, DynamicFitResult]:
    """Dynamic stage on a lifted model; fresh deformation fields are built per object."""
    if model.num_objects != dataset.num_objects:
        raise MosplatError(f"Model has {model.num_objects} objects, dataset has {dataset.num_objects}")
    if model.background is None:
        raise MosplatError("Dynamic fitting needs a background; run the lift stage first")
    deformers = [DeformationField(obj, dataset.num_frames, cfg.deformer, seed=cfg.seed + o)
                 for o, obj in enumerate(model.objects)]
    references = reference_crops(dataset, model.trajectories)
    result = dynamic_fit(model.objects, model.background, model.trajectories, deformers, dataset.targets(),
                         priors, cfg, references, steps)
    fitted = FittedModel(model.objects, result.background, result.trajectories, result.deformers)
    return fitted, result


def scene_at(model: FittedModel, cameras, t: int) -> GaussianSet:
    """World-space scene of frame ``t``; a lifted-only model is shown undeformed."""
    if model.is_dynamic:
        return compose_scene(model.objects, model.deformers, model.trajectories, model.background, cameras, t)
    lifted = [trajectory.lift(obj, t, cameras[t]) for obj, trajectory in zip(model.objects, model.trajectories)]
    return GaussianSet.concat(lifted + ([model.background] if model.background is not None else []))


def reference_psnr(model: FittedModel, dataset: VideoDataset, cfg: StageConfig,
                   frames: Optional[Sequence[int]] = None) -> float:
    """Mean PSNR of reference-view re-renders against the video frames."""
    frames = range(dataset.num_frames) if frames is None else frames
    values = []
    with torch.no_grad():
        for t in frames:
            out = render(scene_at(model, dataset.cameras, t), dataset.cameras[t], num_classes=model.num_objects,
                         settings=cfg.raster)
            values.append(metric_psnr(out.rgb.numpy(), dataset.frames[t]))
    return float(np.mean(values))


def object_at_first_frame(model: FittedModel, o: int) -> GaussianSet:
    if model.is_dynamic:
        return deform_object(model.objects[o], model.deformers[o], 0)[0]
    return model.objects[o]


def novel_view_psnr(model: FittedModel, dataset: VideoDataset, cfg: StageConfig,
                    angles: Sequence[Tuple[float, float]] = PROTOCOL_ANGLES) -> Optional[float]:
    """
    Mean PSNR of object-centric orbit views against the dataset's
    ground-truth views (None when the dataset has none).
    """
    values = []
    with torch.no_grad():
        for o, path in sorted(dataset.prior_views.items()):
            if o >= model.num_objects:
                continue
            truth = SyntheticPrior(load_prior_views(path))
            crop = model.trajectories[o].crop
            gaussians = object_at_first_frame(model, o).with_label(0)
            for elevation, azimuth in angles:
                cam = orbit_camera(crop.camera(), elevation, azimuth, crop.object_center.numpy())
                rgb = render(gaussians, cam, num_classes=1, settings=cfg.raster).rgb.numpy()
                values.append(metric_psnr(rgb, truth.images[truth.nearest(cam.world_to_cam.numpy())]))
    return float(np.mean(values)) if values else None
