"""
Object-centric <-> frame-centric coordinate bridge.

Object-centric coordinates are the coordinates of a virtual crop camera
(``CropCamera``): an S x S pinhole at the origin looking down +z, whose crop
image is the frame warped by the similarity ``p_crop = sigma * p_frame + tau``.
The object sits around ``(0, 0, object_depth)``.

Lifting an object into frame ``t`` (``object_to_frame``):

1. similarity about the crop center: ``X = s * (X_c - o_c) + D * K^-1 [p0; 1]``
   where ``p0 = (c - tau) / sigma`` is the frame pixel under the crop center,
   ``D`` the lift depth and ``s = D * f_crop / (sigma * object_depth * f)``
2. depth-aware scaling about the camera center by ``k``
3. the camera pose, applied last (camera to world)
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torch.nn as nn
from loguru import logger

from ..core.diffcore import DTYPE
from ..core.errors import MosplatError, ObjectAbsent
from ..models import quaternion as quat
from ..models.camera import Camera
from ..models.gaussians import GaussianSet

Scalar = Union[float, torch.Tensor]


@dataclass
class CropCamera:
    """Virtual camera of the object-centric crop."""
    size: int = 128
    focal: Optional[float] = None
    object_depth: float = 2.0

    @property
    def f(self) -> float:
        return float(self.focal) if self.focal is not None else float(self.size)

    @property
    def principal(self) -> float:
        return self.size / 2.0

    @property
    def object_center(self) -> torch.Tensor:
        return torch.tensor([0.0, 0.0, self.object_depth], dtype=DTYPE)

    def camera(self) -> Camera:
        return Camera(self.f, self.f, self.principal, self.principal, self.size, self.size)


@dataclass
class FrameTransform:
    """Detached record of one object's transform at one frame."""
    object_id: int
    frame: int
    bbox: Tuple[float, float, float, float]
    sigma: float
    tau: Tuple[float, float]
    k: float
    depth: float
    reference_id: int
    present: bool = True

    def __post_init__(self):
        x_min, y_min, x_max, y_max = self.bbox
        if x_min > x_max or y_min > y_max:
            raise MosplatError(f"Invalid bbox {self.bbox} for object {self.object_id} at frame {self.frame}")
        if self.sigma <= 0 or self.k <= 0 or self.depth <= 0:
            raise MosplatError(f"Non-positive transform for object {self.object_id} at frame {self.frame}")
        if self.object_id == self.reference_id and self.k != 1.0:
            raise MosplatError("The reference object must have k = 1")


def fit_bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """
    Tight (x_min, y_min, x_max, y_max) box over the set pixels.

    Raises:
        ObjectAbsent: when the mask is empty
    """
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        raise ObjectAbsent()
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def compute_warp(bbox: Sequence[float], crop_size: int, fill: float = 0.65) -> Tuple[float, Tuple[float, float]]:
    """
    Similarity (sigma, tau) that centers the box in the crop and scales its
    longer side to ``fill * crop_size``. Zero extents count as 1 pixel.
    """
    x_min, y_min, x_max, y_max = (float(v) for v in bbox)
    extent = max(x_max - x_min, y_max - y_min, 1.0)
    sigma = fill * crop_size / extent
    half = crop_size / 2.0
    cx, cy = (x_min + x_max) / 2.0, (y_min + y_max) / 2.0
    return sigma, (half - sigma * cx, half - sigma * cy)


def median_depth(depth: np.ndarray, mask: np.ndarray, object_id: Optional[int] = None,
                 frame: Optional[int] = None) -> float:
    values = np.asarray(depth)[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise ObjectAbsent(object_id, frame)
    med = float(np.median(values))
    if med <= 0:
        raise MosplatError(f"Non-positive median depth {med} for object {object_id} at frame {frame}")
    return med


def depth_scale_factor(depth_map: np.ndarray, mask_i: np.ndarray, mask_j: np.ndarray,
                       object_id: Optional[int] = None, reference_id: Optional[int] = None,
                       frame: Optional[int] = None) -> float:
    """k = median depth over mask_i / median depth over mask_j."""
    return median_depth(depth_map, mask_i, object_id, frame) / median_depth(depth_map, mask_j, reference_id, frame)


def apply_depth_scaling(gaussians: GaussianSet, k: Scalar, center: torch.Tensor) -> GaussianSet:
    """Move every Gaussian along the ray from ``center`` by factor ``k``; scales times ``k``."""
    k = torch.as_tensor(k, dtype=DTYPE)
    center = torch.as_tensor(center, dtype=DTYPE)
    return GaussianSet(
        positions=center - (center - gaussians.positions) * k,
        log_scales=gaussians.log_scales + torch.log(k),
        rotations=gaussians.rotations,
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs,
        instance_label=gaussians.instance_label,
    )


def _anchor(cam: Camera, crop: CropCamera, sigma: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Unit-depth ray (camera coordinates) through the frame pixel under the crop center."""
    p0 = (crop.principal - tau) / sigma
    return torch.stack([(p0[0] - cam.cx) / cam.fx, (p0[1] - cam.cy) / cam.fy, torch.ones((), dtype=DTYPE)])


def _similarity_scale(cam: Camera, crop: CropCamera, sigma: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
    return depth * crop.f / (sigma * crop.object_depth * cam.fx)


def object_to_frame(gaussians: GaussianSet, sigma: Scalar, tau, k: Scalar, depth: Scalar,
                    cam: Camera, crop: CropCamera) -> GaussianSet:
    """
    Lift object-centric Gaussians into world coordinates at one frame.

    Differentiable in the Gaussian attributes and in (sigma, tau, k).
    """
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    tau = torch.as_tensor(tau, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    s = _similarity_scale(cam, crop, sigma, depth)
    positions = s * (gaussians.positions - crop.object_center) + depth * _anchor(cam, crop, sigma, tau)
    in_camera = GaussianSet(
        positions=positions,
        log_scales=gaussians.log_scales + torch.log(s),
        rotations=gaussians.rotations,
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs,
        instance_label=gaussians.instance_label,
    )
    scaled = apply_depth_scaling(in_camera, k, torch.zeros(3, dtype=DTYPE))
    return camera_to_world(scaled, cam)


def frame_to_object(gaussians: GaussianSet, sigma: Scalar, tau, k: Scalar, depth: Scalar,
                    cam: Camera, crop: CropCamera) -> GaussianSet:
    """Inverse of ``object_to_frame``."""
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    tau = torch.as_tensor(tau, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    k = torch.as_tensor(k, dtype=DTYPE)
    in_camera = world_to_camera(gaussians, cam)
    s = _similarity_scale(cam, crop, sigma, depth)
    positions = (in_camera.positions / k - depth * _anchor(cam, crop, sigma, tau)) / s + crop.object_center
    return GaussianSet(
        positions=positions,
        log_scales=in_camera.log_scales - torch.log(k) - torch.log(s),
        rotations=in_camera.rotations,
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs,
        instance_label=gaussians.instance_label,
    )


def camera_to_world(gaussians: GaussianSet, cam: Camera) -> GaussianSet:
    if torch.equal(cam.world_to_cam, torch.eye(4, dtype=DTYPE)):
        return gaussians
    q = quat.from_matrix(cam.rotation.T).reshape(1, 4)
    return GaussianSet(
        positions=cam.to_world(gaussians.positions),
        log_scales=gaussians.log_scales,
        rotations=quat.normalize(quat.multiply(q, gaussians.rotations)),
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs,
        instance_label=gaussians.instance_label,
    )


def world_to_camera(gaussians: GaussianSet, cam: Camera) -> GaussianSet:
    if torch.equal(cam.world_to_cam, torch.eye(4, dtype=DTYPE)):
        return gaussians
    q = quat.from_matrix(cam.rotation).reshape(1, 4)
    return GaussianSet(
        positions=cam.to_camera(gaussians.positions),
        log_scales=gaussians.log_scales,
        rotations=quat.normalize(quat.multiply(q, gaussians.rotations)),
        opacity_logits=gaussians.opacity_logits,
        sh_coeffs=gaussians.sh_coeffs,
        instance_label=gaussians.instance_label,
    )


def crop_object(frame: np.ndarray, mask: np.ndarray, sigma: float, tau: Sequence[float],
                crop_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Warp a frame and its mask into the object-centric crop."""
    M = np.array([[sigma, 0.0, tau[0]], [0.0, sigma, tau[1]]], dtype=np.float64)
    image = cv2.warpAffine(np.asarray(frame, dtype=np.float32), M, (crop_size, crop_size),
                           flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    crop_mask = cv2.warpAffine(np.asarray(mask, dtype=np.uint8), M, (crop_size, crop_size),
                               flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    inside = crop_mask > 0
    keep = inside[..., None] if image.ndim == 3 else inside
    return image.astype(np.float64) * keep, inside


def select_reference_object(masks: np.ndarray, seed: Optional[int] = None) -> int:
    """
    Reference object: largest average mask area over all frames, or a
    seeded random choice when ``seed`` is given.

    Args:
        masks: (O, T, H, W) boolean
    """
    masks = np.asarray(masks, dtype=bool)
    if seed is not None:
        return int(np.random.default_rng(seed).integers(masks.shape[0]))
    areas = masks.reshape(masks.shape[0], -1).mean(axis=1)
    return int(np.argmax(areas))


def _fill_absent(values: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Linearly interpolate rows where ``present`` is False (edges hold the nearest value)."""
    if present.all():
        return values
    frames = np.arange(len(values))
    filled = values.copy()
    for column in range(values.shape[1]):
        filled[:, column] = np.interp(frames, frames[present], values[present, column])
    return filled


class ObjectTrajectory(nn.Module):
    """
    Learnable per-frame transforms (log sigma, tau, log k) of one object.

    Lift depths and presence flags are fixed buffers; the reference object
    keeps k = 1 (its log k is not trainable).
    """

    def __init__(self, object_id: int, reference_id: int, sigma: np.ndarray, tau: np.ndarray, k: np.ndarray,
                 depth: np.ndarray, bbox: np.ndarray, present: np.ndarray, crop: CropCamera):
        super().__init__()
        self.object_id = object_id
        self.reference_id = reference_id
        self.crop = crop
        self.log_sigma = nn.Parameter(torch.log(torch.as_tensor(sigma, dtype=DTYPE)))
        self.tau = nn.Parameter(torch.as_tensor(tau, dtype=DTYPE).clone())
        is_reference = object_id == reference_id
        log_k = torch.zeros(len(k), dtype=DTYPE) if is_reference else torch.log(torch.as_tensor(k, dtype=DTYPE))
        self.log_k = nn.Parameter(log_k, requires_grad=not is_reference)
        self.register_buffer("depth", torch.as_tensor(depth, dtype=DTYPE).clone())
        self.register_buffer("bbox", torch.as_tensor(bbox, dtype=DTYPE).clone())
        self.register_buffer("present", torch.as_tensor(present, dtype=torch.bool).clone())

    @property
    def num_frames(self) -> int:
        return self.log_sigma.shape[0]

    def parameters_to_fit(self) -> List[torch.Tensor]:
        return [p for p in (self.log_sigma, self.tau, self.log_k) if p.requires_grad]

    def lift(self, gaussians: GaussianSet, t: int, cam: Camera) -> GaussianSet:
        return object_to_frame(gaussians, torch.exp(self.log_sigma[t]), self.tau[t], torch.exp(self.log_k[t]),
                               self.depth[t], cam, self.crop)

    def unlift(self, gaussians: GaussianSet, t: int, cam: Camera) -> GaussianSet:
        return frame_to_object(gaussians, torch.exp(self.log_sigma[t]), self.tau[t], torch.exp(self.log_k[t]),
                               self.depth[t], cam, self.crop)

    def frame_view(self, view: torch.Tensor, t: int, cam: Camera) -> torch.Tensor:
        """
        world_to_cam of a camera with the crop intrinsics that sees the object
        lifted into frame ``t`` exactly as ``view`` (object-centric world_to_cam)
        sees the canonical object. Its depths are those of ``view`` times k * s.
        """
        with torch.no_grad():
            sigma = torch.exp(self.log_sigma[t])
            k = torch.exp(self.log_k[t])
            s = _similarity_scale(cam, self.crop, sigma, self.depth[t])
            anchor = _anchor(cam, self.crop, sigma, self.tau[t])
            view = torch.as_tensor(view, dtype=DTYPE)
            R, offset = view[:3, :3], view[:3, 3]
            pose = torch.eye(4, dtype=DTYPE)
            pose[:3, :3] = R @ cam.rotation
            pose[:3, 3] = (R @ cam.translation - k * self.depth[t] * (R @ anchor)
                           + k * s * (R @ self.crop.object_center + offset))
        return pose

    def frame_transform(self, t: int) -> FrameTransform:
        with torch.no_grad():
            return FrameTransform(
                object_id=self.object_id,
                frame=t,
                bbox=tuple(float(v) for v in self.bbox[t]),
                sigma=float(torch.exp(self.log_sigma[t])),
                tau=(float(self.tau[t, 0]), float(self.tau[t, 1])),
                k=float(torch.exp(self.log_k[t])),
                depth=float(self.depth[t]),
                reference_id=self.reference_id,
                present=bool(self.present[t]),
            )

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "object_id": np.array([self.object_id, self.reference_id], dtype=np.int64),
            "log_sigma": self.log_sigma.detach().numpy(),
            "tau": self.tau.detach().numpy(),
            "log_k": self.log_k.detach().numpy(),
            "depth": self.depth.numpy(),
            "bbox": self.bbox.numpy(),
            "present": self.present.numpy(),
            "crop": np.array([self.crop.size, self.crop.f, self.crop.object_depth], dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ObjectTrajectory":
        object_id, reference_id = (int(v) for v in arrays["object_id"])
        size, focal, object_depth = arrays["crop"]
        trajectory = cls(object_id, reference_id, np.exp(arrays["log_sigma"]), arrays["tau"], np.exp(arrays["log_k"]),
                         arrays["depth"], arrays["bbox"], arrays["present"],
                         CropCamera(int(size), float(focal), float(object_depth)))
        # stored logs are restored bit-exactly
        with torch.no_grad():
            trajectory.log_sigma.copy_(torch.as_tensor(arrays["log_sigma"], dtype=DTYPE))
            trajectory.log_k.copy_(torch.as_tensor(arrays["log_k"], dtype=DTYPE))
        return trajectory


def init_transforms(masks: np.ndarray, depth: np.ndarray, crop: CropCamera, fill: float = 0.65,
                    reference_id: Optional[int] = None, reference_seed: Optional[int] = None) -> List[ObjectTrajectory]:
    """
    Initialize every object's per-frame transforms from masks and depth.

    Args:
        masks: (O, T, H, W) boolean object masks
        depth: (T, H, W) depth maps
        crop: Object-centric crop camera
        fill: Fraction of the crop covered by the object's longer bbox side
        reference_id: Reference object (default: ``select_reference_object``)
        reference_seed: Seeded random reference instead of the largest object

    Frames where an object is absent are filled by linear interpolation of
    its neighbours' transforms.
    """
    masks = np.asarray(masks, dtype=bool)
    num_objects, num_frames = masks.shape[:2]
    if reference_id is None:
        reference_id = select_reference_object(masks, reference_seed)

    medians = np.full((num_objects, num_frames), np.nan)
    warps = np.zeros((num_objects, num_frames, 3))
    boxes = np.zeros((num_objects, num_frames, 4))
    present = np.zeros((num_objects, num_frames), dtype=bool)
    for o in range(num_objects):
        for t in range(num_frames):
            try:
                box = fit_bbox(masks[o, t])
            except ObjectAbsent:
                logger.debug(f"Object {o} absent at frame {t}")
                continue
            sigma, tau = compute_warp(box, crop.size, fill)
            warps[o, t] = (sigma, tau[0], tau[1])
            boxes[o, t] = box
            medians[o, t] = median_depth(depth[t], masks[o, t], o, t)
            present[o, t] = True
        if not present[o].any():
            raise ObjectAbsent(o, None)

    trajectories = []
    ref_depth = _fill_absent(medians[reference_id][:, None], present[reference_id])[:, 0]
    for o in range(num_objects):
        own_depth = _fill_absent(medians[o][:, None], present[o])[:, 0]
        warp = _fill_absent(warps[o], present[o])
        box = _fill_absent(boxes[o], present[o])
        k = own_depth / ref_depth
        trajectories.append(ObjectTrajectory(o, reference_id, warp[:, 0], warp[:, 1:], k, ref_depth,
                                             box, present[o], crop))
    logger.info(f"Initialized transforms for {num_objects} objects over {num_frames} frames "
                f"(reference object {reference_id})")
    return trajectories
