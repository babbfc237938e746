"""
Run directory layout and fitted-model persistence.

    <run>/config.env              flat key = value stage config
    <run>/checkpoints/step<N>.gmjo
    <run>/renders/
    <run>/tracks.csv
    <run>/metrics.json
    <run>/log.txt                 per-step loss breakdowns
"""
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from loguru import logger

from ..bridge.transforms import ObjectTrajectory
from ..config import StageConfig, dump_stage_config, load_stage_config
from ..core.errors import CheckpointFormatError
from ..models.checkpoint import Section, load_checkpoint_with_sections, pack_arrays, save_checkpoint, unpack_arrays
from ..models.deformer import SECTION_VERSION as DEFORMER_VERSION
from ..models.deformer import DeformationField
from ..models.gaussians import GaussianSet
from ..schemas.run_metrics import RunMetrics

TRAJECTORY_VERSION = 1
META_VERSION = 1
_STEP = re.compile(r"step(\d+)\.gmjo$")


@dataclass
class FittedModel:
    """
    Canonical objects, background, frame transforms and (after the dynamic
    stage) deformation fields.
    """
    objects: List[GaussianSet]
    background: Optional[GaussianSet]
    trajectories: List[ObjectTrajectory]
    deformers: List[DeformationField] = field(default_factory=list)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def is_dynamic(self) -> bool:
        return len(self.deformers) == len(self.objects) and bool(self.objects)

    def save(self, path: Union[str, Path]):
        sets = [o.detach() for o in self.objects]
        if self.background is not None:
            sets.append(self.background.detach())
        meta = {"counts": np.array([len(self.objects), int(self.background is not None), len(self.deformers)],
                                   dtype=np.int64)}
        sections = {"meta": Section(META_VERSION, pack_arrays(meta))}
        for o, trajectory in enumerate(self.trajectories):
            sections[f"trajectory.{o}"] = Section(TRAJECTORY_VERSION, pack_arrays(trajectory.state_arrays()))
        for o, deformer in enumerate(self.deformers):
            sections[f"deformer.{o}"] = Section(DEFORMER_VERSION, pack_arrays(deformer.state_arrays()))
        degree = max((s.sh_degree for s in sets), default=0)
        save_checkpoint([s.with_sh_degree(degree) for s in sets], path, sections, sh_degree=degree)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FittedModel":
        sets, sections = load_checkpoint_with_sections(path)
        if "meta" not in sections:
            raise CheckpointFormatError("section", "meta", sorted(sections))
        num_objects, has_background, num_deformers = (int(v) for v in unpack_arrays(sections["meta"].payload)["counts"])
        if len(sets) != num_objects + has_background:
            raise CheckpointFormatError("set count", num_objects + has_background, len(sets))

        def section(name: str, version: int) -> dict:
            if name not in sections:
                raise CheckpointFormatError("section", name, sorted(sections))
            if sections[name].version != version:
                raise CheckpointFormatError(f"section '{name}' version", version, sections[name].version)
            return unpack_arrays(sections[name].payload)

        trajectories = [ObjectTrajectory.from_arrays(section(f"trajectory.{o}", TRAJECTORY_VERSION))
                        for o in range(num_objects)]
        deformers = [DeformationField.from_arrays(section(f"deformer.{o}", DEFORMER_VERSION))
                     for o in range(num_deformers)]
        background = sets[num_objects].as_parameters({"positions": False}) if has_background else None
        return cls(sets[:num_objects], background, trajectories, deformers)


class RunDir:
    """Artifacts of one pipeline run."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._sink: Optional[int] = None

    @property
    def config_path(self) -> Path:
        return self.root / "config.env"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def renders(self) -> Path:
        return self.root / "renders"

    @property
    def tracks_path(self) -> Path:
        return self.root / "tracks.csv"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.json"

    @property
    def log_path(self) -> Path:
        return self.root / "log.txt"

    def create(self) -> "RunDir":
        for path in (self.root, self.checkpoints, self.renders):
            path.mkdir(parents=True, exist_ok=True)
        return self

    def attach_log(self, level: str = "INFO") -> int:
        """Add a ``log.txt`` sink; returns its loguru handler id."""
        self.create()
        self._sink = logger.add(self.log_path, level=level, format="{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}")
        return self._sink

    def detach_log(self):
        if self._sink is not None:
            logger.remove(self._sink)
            self._sink = None

    def write_config(self, config: StageConfig):
        self.create()
        dump_stage_config(config, self.config_path)

    def read_config(self) -> StageConfig:
        return load_stage_config(self.config_path)

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoints / f"step{step}.gmjo"

    def save_model(self, model: FittedModel, step: int) -> Path:
        path = self.checkpoint_path(step)
        model.save(path)
        logger.info(f"Saved checkpoint {path}")
        return path

    def latest_checkpoint(self) -> Optional[Path]:
        found = [(int(m.group(1)), p) for p in self.checkpoints.glob("step*.gmjo") if (m := _STEP.search(p.name))]
        return max(found)[1] if found else None

    def write_metrics(self, metrics: RunMetrics):
        self.create()
        self.metrics_path.write_text(metrics.model_dump_json(indent=2))

    def read_metrics(self) -> RunMetrics:
        return RunMetrics.model_validate(json.loads(self.metrics_path.read_text()))
