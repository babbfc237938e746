"""
Dynamic fitting: deformation fields and frame transforms of every object,
supervised by the video through one composed render per frame.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from ..bridge.transforms import ObjectTrajectory
from ..config import StageConfig
from ..core.diffcore import DTYPE, AdamW, ParamGroup, accumulate_grads
from ..core.errors import DivergenceError, MosplatError, NonFiniteError, ShapeMismatchError
from ..models.camera import CameraPath
from ..models.deformer import DeformationField, DeformationVector, apply_deformation, deform, sh_l1
from ..models.gaussians import GaussianSet
from ..objectives.losses import (
    LossBreakdown,
    flow_valid_mask,
    loss_class,
    loss_depth,
    loss_flow,
    loss_rgb,
    total_loss,
)
from ..objectives.priors import PriorProvider, sample_taus
from ..objectives.rigidity import NeighborGraph, build_neighbor_graph, loss_rigid
from ..render.rasterizer import RenderOutput, render, render_counter
from .initialization import gaussian_param_groups
from .static_lift import novel_pose_grid, prior_term, sample_novel_cameras


@dataclass
class VideoTargets:
    """Supervision of the dynamic stage as float64 tensors."""
    rgb: torch.Tensor                # (T, H, W, 3)
    masks: torch.Tensor              # (O, T, H, W) bool
    depth: torch.Tensor              # (T, H, W)
    cameras: CameraPath
    flow: Optional[torch.Tensor] = None  # (T-1, H, W, 2) forward flow t -> t+1

    def __post_init__(self):
        T, H, W = self.rgb.shape[:3]
        if tuple(self.depth.shape) != (T, H, W):
            raise ShapeMismatchError("depth targets", (T, H, W), self.depth.shape)
        if tuple(self.masks.shape[1:]) != (T, H, W):
            raise ShapeMismatchError("mask targets", (self.masks.shape[0], T, H, W), self.masks.shape)
        if self.flow is not None and tuple(self.flow.shape) != (T - 1, H, W, 2):
            raise ShapeMismatchError("flow targets", (T - 1, H, W, 2), self.flow.shape)
        if self.cameras.num_frames != T:
            raise MosplatError(f"Camera path has {self.cameras.num_frames} poses for {T} frames")

    @classmethod
    def from_arrays(cls, rgb: np.ndarray, masks: np.ndarray, depth: np.ndarray, cameras: CameraPath,
                    flow: Optional[np.ndarray] = None) -> "VideoTargets":
        return cls(
            rgb=torch.as_tensor(np.asarray(rgb), dtype=DTYPE),
            masks=torch.as_tensor(np.asarray(masks, dtype=bool)),
            depth=torch.as_tensor(np.asarray(depth), dtype=DTYPE),
            cameras=cameras,
            flow=None if flow is None else torch.as_tensor(np.asarray(flow), dtype=DTYPE),
        )

    @property
    def num_frames(self) -> int:
        return self.rgb.shape[0]

    @property
    def num_objects(self) -> int:
        return self.masks.shape[0]

    def labels(self, t: int) -> torch.Tensor:
        """(H, W) instance labels of frame ``t``; unmasked pixels are background."""
        labels = torch.full(self.rgb.shape[1:3], self.num_objects, dtype=torch.int64)
        for o in reversed(range(self.num_objects)):
            labels[self.masks[o, t]] = o
        return labels

    def background_mask(self, t: int) -> torch.Tensor:
        return ~self.masks[:, t].any(dim=0)


@dataclass
class DynamicFitResult:
    deformers: List[DeformationField]
    trajectories: List[ObjectTrajectory]
    background: GaussianSet
    history: List[LossBreakdown] = field(default_factory=list)
    render_calls: int = 0
    frames_rendered: int = 0


class EpochSampler:
    """Frames drawn uniformly without replacement; a new permutation starts every epoch."""

    def __init__(self, num_frames: int, rng: np.random.Generator):
        self.num_frames = num_frames
        self.rng = rng
        self.order = rng.permutation(num_frames)
        self.cursor = 0

    def draw(self, count: int) -> List[int]:
        count = min(count, self.num_frames)
        batch = [int(f) for f in self.order[self.cursor:self.cursor + count]]
        self.cursor += len(batch)
        if len(batch) < count:
            rest = np.array([f for f in range(self.num_frames) if f not in batch])
            taken = np.array(batch, dtype=np.int64)
            self.order = np.concatenate([self.rng.permutation(rest), self.rng.permutation(taken)])
            need = count - len(batch)
            batch += [int(f) for f in self.order[:need]]
            self.cursor = need
        return sorted(batch)


def deform_object(canonical: GaussianSet, field_: DeformationField, t: int) -> Tuple[GaussianSet, DeformationVector]:
    """Object-centric Gaussians of one object at frame ``t``."""
    deformation = deform(field_, canonical, t)
    return apply_deformation(canonical, deformation), deformation


def lifted_object(canonical: GaussianSet, field_: DeformationField, trajectory: ObjectTrajectory,
                  cameras: CameraPath, t: int) -> GaussianSet:
    deformed, _ = deform_object(canonical, field_, t)
    return trajectory.lift(deformed, t, cameras[t])


def compose_scene(objects: Sequence[GaussianSet], deformers: Sequence[DeformationField],
                  trajectories: Sequence[ObjectTrajectory], background: Optional[GaussianSet],
                  cameras: CameraPath, t: int) -> GaussianSet:
    """Every object deformed and bridged to frame ``t``, followed by the background."""
    lifted = [lifted_object(c, f, tr, cameras, t) for c, f, tr in zip(objects, deformers, trajectories)]
    return GaussianSet.concat(lifted + ([background] if background is not None else []))


def render_frame(objects: Sequence[GaussianSet], deformers: Sequence[DeformationField],
                 trajectories: Sequence[ObjectTrajectory], background: Optional[GaussianSet],
                 cameras: CameraPath, t: int, cfg: StageConfig) -> RenderOutput:
    scene = compose_scene(objects, deformers, trajectories, background, cameras, t)
    return render(scene, cameras[t], num_classes=len(objects), settings=cfg.raster)


class DynamicFitter:
    """
    One dynamic-stage optimization run.

    In joint mode each frame is rendered once as a single composed scene. With
    ``cfg.joint = False`` every object (and the background) is rendered on its
    own against its masked targets.
    """

    def __init__(self, objects: Sequence[GaussianSet], background: GaussianSet,
                 trajectories: Sequence[ObjectTrajectory], deformers: Sequence[DeformationField],
                 video: VideoTargets, cfg: StageConfig,
                 priors: Optional[Sequence[Optional[PriorProvider]]] = None,
                 references: Optional[Sequence[Optional[np.ndarray]]] = None):
        if not (len(objects) == len(trajectories) == len(deformers) == video.num_objects):
            raise MosplatError(f"Object count mismatch: {len(objects)} sets, {len(trajectories)} transforms, "
                               f"{len(deformers)} deformers, {video.num_objects} mask streams")
        self.objects = [o.detach() for o in objects]
        self.background = background
        self.trajectories = list(trajectories)
        self.deformers = list(deformers)
        self.video = video
        self.cfg = cfg
        self.weights = cfg.loss_weights
        self.priors = list(priors) if priors is not None else [None] * len(objects)
        self.references = list(references) if references is not None else [None] * len(objects)
        self.graphs: List[NeighborGraph] = [build_neighbor_graph(o.positions, cfg.knn) for o in self.objects]
        self.rng = np.random.default_rng(cfg.seed)
        self.sampler = EpochSampler(video.num_frames, self.rng)
        self.grid = novel_pose_grid(cfg)
        self.optimizer = AdamW(self._param_groups())
        self.latest: Optional[LossBreakdown] = None
        self.frames_seen = 0

    def _param_groups(self) -> List[ParamGroup]:
        cfg = self.cfg
        groups = []
        for o, (field_, trajectory) in enumerate(zip(self.deformers, self.trajectories)):
            parts = field_.parameter_groups()
            groups.append(ParamGroup(f"object{o}.grid", parts["grid"], cfg.lr_grid, cfg.weight_decay))
            groups.append(ParamGroup(f"object{o}.heads", parts["heads"], cfg.lr_heads, cfg.weight_decay))
            groups.append(ParamGroup(f"object{o}.transforms", trajectory.parameters_to_fit(), cfg.lr_scale_rot))
        groups += gaussian_param_groups(self.background, cfg, prefix="background.")
        return groups

    @property
    def params(self) -> List[torch.Tensor]:
        return self.optimizer.params

    # Per-frame objectives

    def _object_terms(self, t: int) -> Tuple[List[GaussianSet], List[GaussianSet], Dict[str, torch.Tensor]]:
        """Deformed object-centric sets, lifted sets and the per-object regularizers."""
        cams = self.video.cameras
        deformed_sets, lifted_sets = [], []
        rigid = torch.zeros((), dtype=DTYPE)
        shreg = torch.zeros((), dtype=DTYPE)
        for canonical, field_, trajectory, graph in zip(self.objects, self.deformers, self.trajectories, self.graphs):
            deformed, deformation = deform_object(canonical, field_, t)
            deformed_sets.append(deformed)
            lifted_sets.append(trajectory.lift(deformed, t, cams[t]))
            if t > 0:
                rigid = rigid + loss_rigid(canonical, deformed, graph, self.cfg.lambda_rot)
                shreg = shreg + sh_l1(deformation.delta_sh)
        return deformed_sets, lifted_sets, {"rigid": rigid, "shreg": shreg}

    def _next_positions(self, t: int) -> Optional[List[torch.Tensor]]:
        if self.video.flow is None or t >= self.video.num_frames - 1:
            return None
        return [lifted_object(c, f, tr, self.video.cameras, t + 1).positions
                for c, f, tr in zip(self.objects, self.deformers, self.trajectories)]

    def _image_terms(self, out: RenderOutput, t: int, region: Optional[torch.Tensor],
                     labels: torch.Tensor, with_flow: bool) -> Dict[str, torch.Tensor]:
        cfg = self.cfg
        video = self.video
        terms = {"rgb": loss_rgb(out.rgb, video.rgb[t], region, cfg.lambda_ssim)}
        coverage = out.alpha.detach() > cfg.flow_alpha_threshold
        depth_mask = coverage & (video.depth[t] > 0)
        if region is not None:
            depth_mask = depth_mask & region
        terms["depth"] = loss_depth(out.depth, video.depth[t], depth_mask)
        terms["class"] = loss_class(out.instance, labels)
        if with_flow:
            valid = flow_valid_mask(out.alpha, video.flow[t], cfg.flow_alpha_threshold)
            if region is not None:
                valid = valid & region
            terms["flow"] = loss_flow(out.flow, video.flow[t], valid)
        return terms

    def _joint_terms(self, t: int, lifted_sets: List[GaussianSet]) -> Dict[str, torch.Tensor]:
        cams = self.video.cameras
        next_positions = self._next_positions(t)
        flow_camera = cams[t + 1] if next_positions is not None else None
        scene = GaussianSet.concat(lifted_sets + [self.background])
        flow_targets = None
        if next_positions is not None:
            flow_targets = torch.cat(next_positions + [self.background.positions], dim=0)
        out = render(scene, cams[t], flow_targets, num_classes=len(self.objects), flow_camera=flow_camera,
                     settings=self.cfg.raster)
        return self._image_terms(out, t, None, self.video.labels(t), next_positions is not None)

    def _independent_terms(self, t: int, lifted_sets: List[GaussianSet]) -> Dict[str, torch.Tensor]:
        cams = self.video.cameras
        num_objects = len(self.objects)
        next_positions = self._next_positions(t)
        flow_camera = cams[t + 1] if next_positions is not None else None
        summed: Dict[str, torch.Tensor] = {}
        renders = 0
        for o, lifted in enumerate(lifted_sets):
            region = self.video.masks[o, t]
            labels = torch.where(region, torch.tensor(o), torch.tensor(num_objects))
            targets = next_positions[o] if next_positions is not None else None
            out = render(lifted, cams[t], targets, num_classes=num_objects, flow_camera=flow_camera,
                         settings=self.cfg.raster)
            for name, value in self._image_terms(out, t, region, labels, targets is not None).items():
                summed[name] = summed.get(name, 0.0) + value
            renders += 1
        region = self.video.background_mask(t)
        out = render(self.background, cams[t], num_classes=num_objects, settings=self.cfg.raster)
        summed["rgb"] = summed.get("rgb", 0.0) + loss_rgb(out.rgb, self.video.rgb[t], region, self.cfg.lambda_ssim)
        renders += 1
        return {name: value / renders if name == "rgb" else value / num_objects for name, value in summed.items()}

    def _prior_terms(self, t: int, deformed_sets: List[GaussianSet]) -> Optional[torch.Tensor]:
        cfg = self.cfg
        if self.weights.w_prior == 0 or cfg.novel_views_per_frame == 0:
            return None
        active = [(o, p) for o, p in enumerate(self.priors) if p is not None]
        if not active:
            return None
        total = torch.zeros((), dtype=DTYPE)
        for o, prior in active:
            crop = self.trajectories[o].crop
            cameras = sample_novel_cameras(self.rng, self.grid, cfg.novel_views_per_frame, crop.camera(),
                                           crop.object_center)
            taus = sample_taus(self.rng, cfg.novel_views_per_frame, cfg.tau_min, cfg.tau_max)
            total = total + prior_term(deformed_sets[o].with_label(0), cameras, taus, prior,
                                       self.references[o], cfg)
        return total / len(active)

    def frame_objective(self, t: int) -> Tuple[torch.Tensor, LossBreakdown]:
        """Weighted loss of frame ``t`` and its per-term breakdown."""
        deformed_sets, lifted_sets, regularizers = self._object_terms(t)
        if self.cfg.joint:
            terms = self._joint_terms(t, lifted_sets)
        else:
            terms = self._independent_terms(t, lifted_sets)
        terms.update(regularizers)
        prior = self._prior_terms(t, deformed_sets)
        if prior is not None:
            terms["prior"] = prior
        return total_loss(terms, self.weights)

    # Optimization loop

    def step(self, step: int) -> LossBreakdown:
        frames = self.sampler.draw(self.cfg.dynamic_batch)
        chunks = [list(c) for c in np.array_split(np.array(frames), min(self.cfg.grad_accum, len(frames)))]
        batch_size = len(frames)
        self.frames_seen += batch_size
        breakdowns: List[LossBreakdown] = []

        def micro_batch(chunk):
            def objective():
                total = torch.zeros((), dtype=DTYPE)
                for t in chunk:
                    value, breakdown = self.frame_objective(int(t))
                    self.latest = breakdown
                    breakdowns.append(breakdown)
                    total = total + value
                return total / batch_size
            return objective

        try:
            accumulate_grads([micro_batch(c) for c in chunks], self.params, check_finite=self.cfg.check_finite)
        except NonFiniteError as e:
            partial = self.latest.terms if self.latest is not None else {}
            logger.error(f"Dynamic fit diverged at step {step}: {e}")
            raise DivergenceError("dynamic_fit", step, {"cause": e.operation, **partial}) from e

        self.optimizer.step()
        self.background.renormalize_()
        merged = _mean_breakdown(breakdowns)
        logger.info(f"dynamic step={step} frames={frames} {merged.line()}")
        return merged

    def run(self, steps: Optional[int] = None) -> DynamicFitResult:
        steps = self.cfg.total_dynamic_steps(self.video.num_frames) if steps is None else steps
        mode = "joint" if self.cfg.joint else "independent"
        logger.info(f"Starting dynamic fit ({mode}): {len(self.objects)} objects, "
                    f"{self.video.num_frames} frames, {steps} steps")
        calls_before = render_counter.calls
        result = DynamicFitResult(self.deformers, self.trajectories, self.background)
        for step in range(1, steps + 1):
            result.history.append(self.step(step))
        result.render_calls = render_counter.calls - calls_before
        result.frames_rendered = self.frames_seen
        logger.info(f"Dynamic fit completed: {result.history[-1].line() if result.history else 'no steps'}")
        return result


def _mean_breakdown(breakdowns: Sequence[LossBreakdown]) -> LossBreakdown:
    merged = LossBreakdown()
    if not breakdowns:
        return merged
    names = []
    for b in breakdowns:
        names += [n for n in b.terms if n not in names]
    for name in names:
        values = [b.terms[name] for b in breakdowns if name in b.terms]
        weighted = [b.weighted[name] for b in breakdowns if name in b.weighted]
        merged.terms[name] = float(np.mean(values))
        merged.weighted[name] = float(np.mean(weighted))
    merged.total = float(np.mean([b.total for b in breakdowns]))
    return merged


def dynamic_fit(objects: Sequence[GaussianSet], background: GaussianSet, trajectories: Sequence[ObjectTrajectory],
                deformers: Sequence[DeformationField], video: VideoTargets,
                priors: Optional[Sequence[Optional[PriorProvider]]], cfg: StageConfig,
                references: Optional[Sequence[Optional[np.ndarray]]] = None,
                steps: Optional[int] = None) -> DynamicFitResult:
    """
    Fit deformers, frame transforms and background appearance to the video.

    Canonical object Gaussians stay fixed. Each step draws ``dynamic_batch``
    frames, splits them into ``grad_accum`` micro-batches whose gradients are
    summed, then takes one AdamW step.

    Raises:
        DivergenceError: with the per-term breakdown of the failing frame
    """
    fitter = DynamicFitter(objects, background, trajectories, deformers, video, cfg, priors, references)
    return fitter.run(steps)


def render_reference(objects: Sequence[GaussianSet], deformers: Sequence[DeformationField],
                     trajectories: Sequence[ObjectTrajectory], background: Optional[GaussianSet],
                     cameras: CameraPath, cfg: StageConfig) -> List[RenderOutput]:
    """Detached reference-view render of every frame."""
    with torch.no_grad():
        return [render_frame(objects, deformers, trajectories, background, cameras, t, cfg).detach()
                for t in range(cameras.num_frames)]
