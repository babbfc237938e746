import json
import shutil

import pytest
from loguru import logger

from mosplat.main import main
from mosplat.pipelines.run_dir import RunDir
from mosplat.schemas.scene_spec import ObjectSpec, SceneSpec, TrajectorySpec

TINY = [
    "--set", "static_steps=2", "--set", "static_batch=1", "--set", "init_count=60", "--set", "init_opacity=0.3",
    "--set", "background_count=150", "--set", "background_steps=1", "--set", "crop_size=32",
    "--set", "maintenance_interval=100",
]
TINY_DYNAMIC = TINY + [
    "--set", "dynamic_batch=2", "--set", "novel_views_per_frame=0", "--set", "num_bases=2",
    "--set", "grid_features=4", "--set", "spatial_resolution=8", "--set", "head_width=8", "--set", "head_layers=1",
]


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    logger.remove()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = SceneSpec(
        name="cli", num_frames=3, width=40, height=40, keypoints_per_object=2,
        objects=[ObjectSpec(shape="sphere", size=0.5, texture_seed=1,
                            trajectory=TrajectorySpec(kind="linear", start=[-0.2, 0.0, 4.0], end=[0.0, 0.0, 4.0]))],
    )
    spec_file = root / "scene.json"
    spec_file.write_text(spec.model_dump_json())
    assert main(["synth", "--spec", str(spec_file), "--out", str(root / "data"), "--no-prior"]) == 0
    return root / "data"


def test_synth_writes_a_dataset(dataset_dir):
    for name in ("frames", "masks", "depth", "flow", "cameras.json", "tracks.csv", "scene.json"):
        assert (dataset_dir / name).exists()
    assert not (dataset_dir / "prior").exists()


def test_eval_of_ground_truth_against_itself(dataset_dir, capsys):
    assert main(["eval", "--pred", str(dataset_dir / "tracks.csv"), "--data", str(dataset_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert (report["ate"], report["mte"], report["a_epe"], report["m_epe"]) == (0.0, 0.0, 0.0, 0.0)
    assert report["num_tracks"] == 2


def test_stats_prints_json(dataset_dir, capsys):
    assert main(["stats", "--tracks", str(dataset_dir / "tracks.csv")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_videos"] == 1
    assert stats["avg_points_per_video"] == 2.0


def test_invalid_dataset_fails_with_exit_code_one(dataset_dir, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(dataset_dir, broken)
    shutil.rmtree(broken / "depth")
    run = tmp_path / "run"
    assert main(["fit", "--data", str(broken), "--run", str(run)]) == 1
    assert "Missing required stream 'depth'" in RunDir(run).log_path.read_text()


def test_usage_errors(dataset_dir, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["lift", "--data", str(dataset_dir), "--run", str(tmp_path / "run"), "--bogus"])
    assert err.value.code == 2
    assert main(["lift", "--data", str(dataset_dir), "--run", str(tmp_path / "run"), "--set", "no_such_key=1"]) == 1
    assert main(["eval", "--pred", str(dataset_dir / "tracks.csv")]) == 1
    assert main(["synth", "--spec", "nowhere", "--out", str(tmp_path / "out")]) == 1


def test_render_without_a_checkpoint_fails(dataset_dir, tmp_path):
    assert main(["render", "--data", str(dataset_dir), "--run", str(tmp_path / "run")]) == 1


def test_lift_then_render(dataset_dir, tmp_path):
    run = RunDir(tmp_path / "run")
    assert main(["lift", "--data", str(dataset_dir), "--run", str(run.root)] + TINY) == 0
    assert run.latest_checkpoint() == run.checkpoint_path(2)
    assert run.read_config().static_steps == 2

    assert main(["render", "--data", str(dataset_dir), "--run", str(run.root), "--angles", "protocol", "--frames", "0"]) == 0
    sets = sorted(p.name for p in run.renders.iterdir() if p.is_dir())
    assert len(sets) == 5
    assert "reference" in sets
    for name in sets:
        assert (run.renders / name / "frame_0000.png").exists()
    assert (run.renders / "sheet.png").exists()
    metrics = run.read_metrics()
    assert metrics.psnr is not None
    assert metrics.novel_psnr is None


@pytest.mark.slow
def test_fit_then_track(dataset_dir, tmp_path):
    run = RunDir(tmp_path / "run")
    assert main(["fit", "--data", str(dataset_dir), "--run", str(run.root), "--steps", "1"] + TINY_DYNAMIC) == 0
    assert run.latest_checkpoint() == run.checkpoint_path(3)
    assert main(["track", "--data", str(dataset_dir), "--run", str(run.root)]) == 0
    assert run.tracks_path.exists()
    metrics = run.read_metrics()
    assert metrics.tracks.num_tracks == 2
    assert metrics.extra["render_calls"] > 0


@pytest.mark.slow
def test_same_seed_gives_identical_checkpoints_and_metrics(dataset_dir, tmp_path):
    threaded = TINY_DYNAMIC + ["--set", "render_threads=3", "--set", "tile_size=8", "--set", "seed=4"]
    runs = [RunDir(tmp_path / name) for name in ("first", "second")]
    for run in runs:
        assert main(["fit", "--data", str(dataset_dir), "--run", str(run.root), "--steps", "2"] + threaded) == 0

    lifted = [run.checkpoint_path(2).read_bytes() for run in runs]
    fitted = [run.checkpoint_path(4).read_bytes() for run in runs]
    assert lifted[0] == lifted[1]
    assert fitted[0] == fitted[1]
    assert runs[0].metrics_path.read_text() == runs[1].metrics_path.read_text()
    assert runs[0].read_metrics().extra["render_calls"] > 0
