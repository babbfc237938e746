import shutil

import numpy as np
import pytest

from mosplat.bench.dataset import ingest
from mosplat.core.errors import DatasetError
from mosplat.render.image_io import write_image


@pytest.fixture
def written(tiny_scene, tmp_path):
    return tiny_scene.write(tmp_path / "tiny")


def test_written_scene_is_ingested_faithfully(tiny_scene, written):
    dataset = ingest(written)
    assert (dataset.num_frames, dataset.num_objects) == (4, 2)
    assert (dataset.height, dataset.width) == (48, 48)
    assert np.abs(dataset.frames - tiny_scene.frames).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(dataset.masks, tiny_scene.masks)
    assert np.array_equal(dataset.depth, tiny_scene.depth.astype(np.float32).astype(np.float64))
    assert np.array_equal(dataset.flow, tiny_scene.flow.astype(np.float32).astype(np.float64))
    assert dataset.tracks.ids == tiny_scene.tracks.ids
    assert np.allclose(dataset.tracks.uv(), tiny_scene.tracks.uv())
    assert np.array_equal(dataset.tracks.visibility(), tiny_scene.tracks.visibility())
    assert dataset.cameras.num_frames == 4
    assert dataset.missing == ["prior"]


def test_missing_required_stream_is_named(written):
    shutil.rmtree(written / "depth")
    with pytest.raises(DatasetError, match="Missing required stream 'depth'"):
        ingest(written)


def test_mask_resolution_mismatch_names_the_file(written):
    bad = written / "masks" / "object_1" / "frame_0002.png"
    write_image(bad, np.ones((24, 24)))
    with pytest.raises(DatasetError, match="Masks differ from frame resolution") as err:
        ingest(written)
    assert err.value.files == [str(bad)]


def test_missing_mask_frame_is_rejected(written):
    (written / "masks" / "object_0" / "frame_0003.png").unlink()
    with pytest.raises(DatasetError, match="masks/object_0"):
        ingest(written)


def test_optional_streams_are_reported(written):
    shutil.rmtree(written / "flow")
    (written / "tracks.csv").unlink()
    dataset = ingest(written)
    assert dataset.flow is None
    assert dataset.tracks is None
    assert dataset.missing == ["flow", "tracks", "prior"]


def test_unknown_directory(tmp_path):
    with pytest.raises(DatasetError):
        ingest(tmp_path / "nowhere")
