import torch

from mosplat.config import StageConfig
from mosplat.models.deformer import DeformationField
from mosplat.pipelines.run_dir import FittedModel, RunDir
from mosplat.schemas.run_metrics import RunMetrics, TrackMetrics


def test_lifted_model_round_trip(lifted_model, tmp_path):
    assert not lifted_model.is_dynamic
    lifted_model.save(tmp_path / "model.gmjo")
    restored = FittedModel.load(tmp_path / "model.gmjo")
    assert restored.num_objects == lifted_model.num_objects == 2
    for a, b in zip(restored.objects, lifted_model.objects):
        assert torch.equal(a.positions, b.positions)
        assert torch.equal(a.instance_label, b.instance_label)
    assert torch.equal(restored.background.sh_coeffs, lifted_model.background.sh_coeffs)
    assert not restored.background.positions.requires_grad
    assert restored.background.sh_coeffs.requires_grad
    for a, b in zip(restored.trajectories, lifted_model.trajectories):
        assert torch.equal(a.tau, b.tau)
        assert a.reference_id == b.reference_id


def test_dynamic_model_keeps_its_deformers(lifted_model, tiny_cfg, tmp_path):
    deformers = [DeformationField(obj, 4, tiny_cfg.deformer, seed=o) for o, obj in enumerate(lifted_model.objects)]
    with torch.no_grad():
        deformers[1].bases.free.add_(0.25)
    model = FittedModel(lifted_model.objects, lifted_model.background, lifted_model.trajectories, deformers)
    assert model.is_dynamic
    model.save(tmp_path / "dynamic.gmjo")
    restored = FittedModel.load(tmp_path / "dynamic.gmjo")
    assert restored.is_dynamic
    assert torch.equal(restored.deformers[1].bases.free, deformers[1].bases.free)


def test_latest_checkpoint_uses_the_step_number(lifted_model, tmp_path):
    run = RunDir(tmp_path / "run").create()
    assert run.latest_checkpoint() is None
    for step in (2, 10, 9):
        run.save_model(lifted_model, step)
    (run.checkpoints / "notes.gmjo").write_text("")
    assert run.latest_checkpoint() == run.checkpoint_path(10)


def test_config_and_metrics_files(tmp_path):
    run = RunDir(tmp_path / "run")
    run.write_config(StageConfig(static_steps=7, crop_size=64))
    config = run.read_config()
    assert (config.static_steps, config.crop_size) == (7, 64)

    metrics = RunMetrics(tracks=TrackMetrics(ate=1.5, mte=1.0, a_epe=2.0, m_epe=2.0, num_tracks=3), psnr=31.0)
    run.write_metrics(metrics)
    assert run.read_metrics() == metrics


def test_run_log_receives_messages(tmp_path):
    from loguru import logger

    run = RunDir(tmp_path / "run")
    run.attach_log()
    logger.info("dynamic step=1 total=0.5")
    run.detach_log()
    logger.info("after detach")
    text = run.log_path.read_text()
    assert "dynamic step=1 total=0.5" in text
    assert "after detach" not in text
