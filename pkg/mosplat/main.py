"""
Entry point of the mosplat command line.

    python -m mosplat synth --spec crossing2 --seed 7 --out data/crossing2
    python -m mosplat lift --data data/crossing2 --run runs/crossing2 --prior oracle
    python -m mosplat fit --data data/crossing2 --run runs/crossing2 --prior oracle
    python -m mosplat render --data data/crossing2 --run runs/crossing2 --angles protocol
    python -m mosplat track --data data/crossing2 --run runs/crossing2
    python -m mosplat eval --pred runs/crossing2/tracks.csv --data data/crossing2
    python -m mosplat stats --tracks data/crossing2/tracks.csv
"""
import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from loguru import logger

from .bench.dataset import CAMERAS, frame_name, ingest
from .bench.metrics import evaluate_tracks
from .bench.stats import track_stats
from .bench.synth import PRESETS, generate_scene, preset
from .bench.tracks import read_tracks_csv, write_tracks_csv
from .config import StageConfig, load_stage_config
from .core.errors import MosplatError
from .models.camera import CameraPath
from .pipelines.run_dir import FittedModel, RunDir
from .pipelines.stages import (
    PRIOR_MODES,
    close_priors,
    fit_scene,
    lift_scene,
    novel_view_psnr,
    open_priors,
    reference_psnr,
    scene_at,
)
from .pipelines.tracking import extract_tracks, queries_from_tracks, sample_queries
from .render.image_io import write_contact_sheet, write_image
from .render.novel_view import PROTOCOL_ANGLES, recentered_camera, render_novel_view_set
from .render.rasterizer import render
from .schemas.run_metrics import RunMetrics
from .schemas.scene_spec import SceneSpec

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name} - {message}"
RUN_COMMANDS = ("lift", "fit", "render", "track")


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None):
    """Setup logging configuration."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file is not None:
        logger.add(log_file, level="DEBUG", format=LOG_FORMAT)


def _overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    values = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise MosplatError(f"Expected key=value, got '{pair}'")
        values[key.strip().lower()] = value.strip()
    return values


def _stage_config(args, run: RunDir) -> StageConfig:
    if args.config is not None:
        cfg = load_stage_config(args.config)
    elif run.config_path.exists():
        cfg = run.read_config()
    else:
        cfg = StageConfig()
    overrides = _overrides(args.set)
    if overrides:
        cfg = StageConfig(**{**cfg.model_dump(exclude_none=True), **overrides})
    return cfg


def _load_model(run: RunDir) -> FittedModel:
    path = run.latest_checkpoint()
    if path is None:
        raise MosplatError(f"No checkpoint in {run.checkpoints}; run 'lift' or 'fit' first")
    logger.info(f"Loading checkpoint {path}")
    return FittedModel.load(path)


def _read_metrics(run: RunDir) -> RunMetrics:
    return run.read_metrics() if run.metrics_path.exists() else RunMetrics()


def _novel_set_name(elevation: float, azimuth: float) -> str:
    return f"novel_el{elevation:+.0f}_az{azimuth:+.0f}"


# Subcommands

def cmd_synth(args) -> int:
    if args.spec in PRESETS:
        spec = preset(args.spec)
    else:
        path = Path(args.spec)
        if not path.exists():
            raise MosplatError(f"'{args.spec}' is neither a preset ({', '.join(PRESETS)}) nor a scene file")
        spec = SceneSpec.model_validate_json(path.read_text())
    scene = generate_scene(spec, args.seed, workers=args.workers, with_prior=not args.no_prior)
    root = scene.write(args.out)
    logger.info(f"Dataset written to {root}")
    return 0


def _lift(dataset, cfg: StageConfig, run: RunDir, priors) -> FittedModel:
    model, report = lift_scene(dataset, cfg, priors)
    for o, lift in enumerate(report.lifts):
        logger.info(f"Object {o}: {len(lift.gaussians)} Gaussians after {lift.steps} steps")
    run.save_model(model, cfg.static_steps)
    return model


def cmd_lift(args) -> int:
    dataset = ingest(args.data)
    run = RunDir(args.run).create()
    cfg = _stage_config(args, run)
    run.write_config(cfg)
    torch.manual_seed(cfg.seed)
    priors = open_priors(dataset, args.prior, args.prior_command)
    try:
        _lift(dataset, cfg, run, priors)
    finally:
        close_priors(priors)
    return 0


def cmd_fit(args) -> int:
    dataset = ingest(args.data)
    run = RunDir(args.run).create()
    cfg = _stage_config(args, run)
    run.write_config(cfg)
    torch.manual_seed(cfg.seed)
    steps = args.steps or cfg.total_dynamic_steps(dataset.num_frames)
    priors = open_priors(dataset, args.prior, args.prior_command)
    try:
        lifted = run.checkpoint_path(cfg.static_steps)
        if lifted.exists():
            logger.info(f"Resuming from lifted checkpoint {lifted}")
            model = FittedModel.load(lifted)
        else:
            model = _lift(dataset, cfg, run, priors)
        fitted, result = fit_scene(model, dataset, cfg, priors, steps)
    finally:
        close_priors(priors)
    run.save_model(fitted, cfg.static_steps + steps)
    metrics = _read_metrics(run)
    metrics.psnr = reference_psnr(fitted, dataset, cfg)
    metrics.extra["render_calls"] = float(result.render_calls)
    if result.history:
        metrics.extra["final_loss"] = result.history[-1].total
    run.write_metrics(metrics)
    logger.info(f"Reference-view PSNR {metrics.psnr:.2f} dB")
    return 0


def cmd_render(args) -> int:
    dataset = ingest(args.data)
    run = RunDir(args.run).create()
    cfg = _stage_config(args, run)
    model = _load_model(run)
    angles = list(PROTOCOL_ANGLES) if args.angles == "protocol" else []
    frames: List[int] = args.frames if args.frames else list(range(dataset.num_frames))
    names = ["reference"] + [_novel_set_name(el, az) for el, az in angles]
    cameras = dataset.cameras

    with torch.no_grad():
        for t in frames:
            scene = scene_at(model, cameras, t)
            outputs = [render(scene, cameras[t], num_classes=model.num_objects, settings=cfg.raster)]
            if angles:
                pivot = torch.quantile(scene.positions.detach(), 0.5, dim=0)
                outputs += render_novel_view_set(scene, recentered_camera(cameras[t], pivot), angles,
                                                 model.num_objects, cfg.raster)
            for name, out in zip(names, outputs):
                write_image(run.renders / name / frame_name(t, ".png"), out.rgb.numpy())
            if t == frames[0]:
                write_contact_sheet(run.renders / "sheet.png", [o.rgb.numpy() for o in outputs], names)
    logger.info(f"Wrote {len(names)} image sets for {len(frames)} frames to {run.renders}")

    metrics = _read_metrics(run)
    metrics.psnr = reference_psnr(model, dataset, cfg, frames)
    metrics.novel_psnr = novel_view_psnr(model, dataset, cfg)
    run.write_metrics(metrics)
    return 0


def cmd_track(args) -> int:
    dataset = ingest(args.data)
    run = RunDir(args.run).create()
    cfg = _stage_config(args, run)
    model = _load_model(run)
    if not model.is_dynamic:
        raise MosplatError("Tracking needs a fitted model; run 'fit' first")
    first_masks = dataset.masks[:, 0]
    if args.queries is not None:
        queries = queries_from_tracks(read_tracks_csv(args.queries))
    elif dataset.tracks is not None:
        queries = queries_from_tracks(dataset.tracks)
    else:
        queries = sample_queries(first_masks, args.per_object, cfg.seed)
    tracks = extract_tracks(queries, model.objects, model.deformers, model.trajectories, model.background,
                            dataset.cameras, first_masks, cfg)
    write_tracks_csv(tracks, run.tracks_path)
    logger.info(f"Wrote {len(tracks)} tracks to {run.tracks_path}")
    if dataset.tracks is not None and args.queries is None:
        metrics = _read_metrics(run)
        metrics.tracks = evaluate_tracks(tracks, dataset.tracks, dataset.width, dataset.height)
        run.write_metrics(metrics)
    return 0


def cmd_eval(args) -> int:
    pred = read_tracks_csv(args.pred)
    width, height = args.width, args.height
    gt_path = args.gt
    if args.data is not None:
        cameras = CameraPath.load(Path(args.data) / CAMERAS)
        width, height = width or cameras.width, height or cameras.height
        gt_path = gt_path or Path(args.data) / "tracks.csv"
    if gt_path is None:
        raise MosplatError("No ground truth: pass --gt or --data")
    if not (width and height):
        raise MosplatError("Image size unknown: pass --data or --width/--height")
    metrics = evaluate_tracks(pred, read_tracks_csv(gt_path), width, height, args.include_occluded)
    print(metrics.model_dump_json(indent=2))
    if args.run is not None:
        run = RunDir(args.run)
        record = _read_metrics(run)
        record.tracks = metrics
        run.write_metrics(record)
    return 0


def cmd_stats(args) -> int:
    stats = track_stats([read_tracks_csv(path) for path in args.tracks])
    print(stats.model_dump_json(indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")

    staged = argparse.ArgumentParser(add_help=False)
    staged.add_argument("--data", type=Path, required=True, help="Dataset directory")
    staged.add_argument("--run", type=Path, required=True, help="Run directory")
    staged.add_argument("--config", type=Path, default=None, help="Stage config file (key = value)")
    staged.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config field")

    priors = argparse.ArgumentParser(add_help=False)
    priors.add_argument("--prior", choices=PRIOR_MODES, default="none", help="Novel-view prior source")
    priors.add_argument("--prior-command", type=str, default=None,
                        help="External prior command; '{views}' is replaced by the object's view file")

    parser = argparse.ArgumentParser(prog="mosplat", description="Multi-object 4D Gaussian splatting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--spec", type=str, required=True, help=f"Preset ({', '.join(PRESETS)}) or scene JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="Output dataset directory")
    p.add_argument("--workers", type=int, default=1, help="Frame rendering threads")
    p.add_argument("--no-prior", action="store_true", help="Skip ground-truth novel views")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("lift", parents=[common, staged, priors], help="Static lifting + background")
    p.set_defaults(handler=cmd_lift)

    p = sub.add_parser("fit", parents=[common, staged, priors], help="Dynamic fitting (lifts first if needed)")
    p.add_argument("--steps", type=int, default=None, help="Dynamic steps (default from config)")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("render", parents=[common, staged], help="Reference and novel-view renders")
    p.add_argument("--angles", choices=["protocol", "reference"], default="protocol",
                   help="'protocol': reference + four fixed novel angles")
    p.add_argument("--frames", type=int, nargs="*", default=None, help="Frames to render (default all)")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("track", parents=[common, staged], help="Extract point tracks")
    p.add_argument("--queries", type=Path, default=None, help="Tracks whose first-frame pixels are the queries")
    p.add_argument("--per-object", type=int, default=5, help="Sampled queries per object without ground truth")
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="Track metrics")
    p.add_argument("--pred", type=Path, required=True, help="Predicted tracks.csv")
    p.add_argument("--gt", type=Path, default=None, help="Ground-truth tracks.csv (default <data>/tracks.csv)")
    p.add_argument("--data", type=Path, default=None, help="Dataset directory (image size, ground truth)")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--include-occluded", action="store_true", help="Count ground-truth-invisible samples")
    p.add_argument("--run", type=Path, default=None, help="Also record into <run>/metrics.json")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="Track statistics over videos")
    p.add_argument("--tracks", type=Path, nargs="+", required=True, help="One tracks.csv per video")
    p.set_defaults(handler=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    run = RunDir(args.run) if args.command in RUN_COMMANDS else None
    if run is not None:
        run.attach_log("DEBUG")
    logger.info(f"Starting mosplat {args.command}")
    try:
        code = args.handler(args)
        logger.info(f"mosplat {args.command} completed")
        return code
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 130
    except Exception as e:
        logger.error(f"mosplat {args.command} failed: {e}")
        return 1
    finally:
        if run is not None:
            run.detach_log()


if __name__ == "__main__":
    sys.exit(main())
