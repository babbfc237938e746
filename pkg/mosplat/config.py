"""
Configuration module for mosplat runs.

A run config is a flat ``key = value`` text file (``config.env`` inside a run
directory). Values are validated by ``StageConfig``; ``MOSPLAT_*`` environment
variables take precedence over file values.
"""
import math
from pathlib import Path
from typing import Optional, Union

from dotenv import dotenv_values
from loguru import logger
from pydantic import BaseModel, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LossWeights(BaseModel):
    """Weights of the terms combined by ``total_loss``."""
    w_rgb: float = Field(1.0, ge=0, description="RGB L1 + D-SSIM")
    w_flow: float = Field(0.5, ge=0, description="Rendered vs target flow")
    w_depth: float = Field(0.25, ge=0, description="Scale-invariant log depth")
    w_class: float = Field(0.5, ge=0, description="Instance negative log-likelihood")
    w_rigid: float = Field(0.1, ge=0, description="Local rigidity")
    w_shreg: float = Field(0.01, ge=0, description="L1 on SH adjustments")
    w_prior: float = Field(0.01, ge=0, description="Novel-view prior")
    w_mask: float = Field(1.0, ge=0, description="Alpha vs mask (static lift only)")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in self.model_dump().items()})


class RasterSettings(BaseModel):
    tile_size: int = Field(16, gt=0, description="Tile edge in pixels")
    threads: int = Field(1, ge=1, description="Tile worker threads")
    sh_degree: int = Field(1, ge=0, le=3, description="Evaluated SH degree")


class BridgeSettings(BaseModel):
    crop_size: int = Field(128, gt=0, description="Object-centric crop edge in pixels")
    crop_fill: float = Field(0.65, gt=0, le=1, description="Fraction of the crop covered by the object")
    reference_seed: Optional[int] = Field(None, description="Random reference object instead of largest")


class DeformerSettings(BaseModel):
    num_bases: int = Field(10, gt=0, description="Motion bases B")
    features: int = Field(16, gt=0, description="Feature width per plane")
    spatial_resolution: int = Field(64, ge=2, description="Spatial plane resolution")
    time_resolution_factor: float = Field(0.8, gt=0, description="Temporal resolution as a fraction of T")
    head_width: int = Field(64, gt=0, description="Hidden width of every head")
    head_layers: int = Field(2, ge=1, description="Hidden layers of every head")
    plane_noise: float = Field(0.1, ge=0, description="Spatial plane init noise around 1")


class StageConfig(BaseSettings):
    """All knobs of the two-stage optimization."""
    model_config = SettingsConfigDict(env_prefix="MOSPLAT_", extra="forbid")

    seed: int = Field(0, description="Seed of every random draw in a run")
    sh_degree: int = Field(1, ge=0, le=3, description="Stored spherical-harmonics degree")
    check_finite: bool = Field(False, description="Check every intermediate value for NaN/Inf")

    # Static lifting
    static_steps: int = Field(1000, gt=0, description="Static lifting iterations")
    static_batch: int = Field(16, gt=0, description="Novel poses per static step")
    init_count: int = Field(2000, gt=0, description="Seed Gaussians per object")
    init_opacity: float = Field(0.1, gt=0, lt=1, description="Initial base opacity")

    # Background
    background_count: int = Field(2000, gt=0, description="Seed Gaussians of the background")
    background_steps: int = Field(100, ge=0, description="RGB-only background pre-fit iterations")

    # Dynamic fitting
    dynamic_steps_per_frame: int = Field(35, gt=0, description="Dynamic steps per video frame")
    dynamic_steps: Optional[int] = Field(None, gt=0, description="Explicit dynamic step count")
    dynamic_batch: int = Field(8, gt=0, description="Frames per dynamic step")
    grad_accum: int = Field(2, gt=0, description="Micro-batches per dynamic step")
    novel_views_per_frame: int = Field(4, ge=0, description="Prior views per object per frame")
    joint: bool = Field(True, description="Jointly splat all objects (False: independent objects)")

    # Learning rates
    lr_position_init: float = Field(1e-3, ge=0, description="Position lr at step 0")
    lr_position_final: float = Field(2e-5, ge=0, description="Position lr at the last static step")
    lr_sh: float = Field(0.01, ge=0)
    lr_opacity: float = Field(0.05, ge=0)
    lr_scale_rot: float = Field(5e-3, ge=0, description="Scales, rotations and frame transforms")
    lr_grid: float = Field(6.4e-4, ge=0, description="Factored grid planes")
    lr_heads: float = Field(6.4e-3, ge=0, description="Heads and motion bases")
    weight_decay: float = Field(0.0, ge=0)

    # Maintenance
    prune_opacity: float = Field(0.01, gt=0)
    prune_scale: float = Field(0.05, gt=0)
    densify_grad: float = Field(0.5, gt=0)
    densify_max_scale: float = Field(0.05, gt=0)
    maintenance_interval: int = Field(100, gt=0)
    gaussian_cap: int = Field(20000, gt=0)
    split_children: int = Field(2, ge=2)
    split_scale_factor: float = Field(1.6, gt=1)

    # Loss weights and constants
    w_rgb: float = Field(1.0, ge=0)
    w_flow: float = Field(0.5, ge=0)
    w_depth: float = Field(0.25, ge=0)
    w_class: float = Field(0.5, ge=0)
    w_rigid: float = Field(0.1, ge=0)
    w_shreg: float = Field(0.01, ge=0)
    w_prior: float = Field(0.01, ge=0)
    w_mask: float = Field(1.0, ge=0)
    lambda_ssim: float = Field(0.2, ge=0, le=1)
    lambda_rot: float = Field(0.5, ge=0)
    knn: int = Field(8, gt=0)
    flow_alpha_threshold: float = Field(0.5, ge=0, le=1)

    # Prior sampling
    novel_elevation_max: float = Field(30.0, ge=0, le=89)
    novel_azimuth_max: float = Field(180.0, ge=0, le=180)
    novel_angle_step: float = Field(15.0, gt=0, description="Spacing of the novel-pose angle grid (degrees)")
    tau_min: float = Field(0.02, ge=0, le=1)
    tau_max: float = Field(0.98, ge=0, le=1)

    # Deformer
    num_bases: int = Field(10, gt=0)
    grid_features: int = Field(16, gt=0)
    spatial_resolution: int = Field(64, ge=2)
    time_resolution_factor: float = Field(0.8, gt=0)
    head_width: int = Field(64, gt=0)
    head_layers: int = Field(2, ge=1)

    # Bridge and rasterizer
    crop_size: int = Field(128, gt=0)
    crop_fill: float = Field(0.65, gt=0, le=1)
    reference_seed: Optional[int] = Field(None)
    tile_size: int = Field(16, gt=0)
    render_threads: int = Field(1, ge=1)

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        return env_settings, init_settings, file_secret_settings

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: getattr(self, k) for k in LossWeights.model_fields})

    @property
    def raster(self) -> RasterSettings:
        return RasterSettings(tile_size=self.tile_size, threads=self.render_threads, sh_degree=self.sh_degree)

    @property
    def bridge(self) -> BridgeSettings:
        return BridgeSettings(crop_size=self.crop_size, crop_fill=self.crop_fill,
                              reference_seed=self.reference_seed)

    @property
    def deformer(self) -> DeformerSettings:
        return DeformerSettings(
            num_bases=self.num_bases,
            features=self.grid_features,
            spatial_resolution=self.spatial_resolution,
            time_resolution_factor=self.time_resolution_factor,
            head_width=self.head_width,
            head_layers=self.head_layers,
        )

    def total_dynamic_steps(self, num_frames: int) -> int:
        if self.dynamic_steps is not None:
            return self.dynamic_steps
        return self.dynamic_steps_per_frame * num_frames

    def time_resolution(self, num_frames: int) -> int:
        return max(2, math.ceil(self.time_resolution_factor * num_frames))


def load_stage_config(path: Union[str, Path]) -> StageConfig:
    """
    Load a flat ``key = value`` config file.

    Unknown keys are rejected; missing keys take their defaults.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None and v != ""}
    config = StageConfig(**values)
    logger.info(f"Loaded stage config from {path} ({len(values)} keys)")
    return config


def dump_stage_config(config: StageConfig, path: Union[str, Path]):
    """Write every set field as ``key = value``, one per line, in declaration order."""
    lines = [f"{name} = {value}" for name, value in config.model_dump().items() if value is not None]
    Path(path).write_text("\n".join(lines) + "\n")
