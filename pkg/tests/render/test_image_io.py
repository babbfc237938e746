import numpy as np
import pytest

from mosplat.core.errors import DatasetError
from mosplat.render.image_io import (
    image_size,
    plane_shape,
    read_image,
    read_mask,
    read_plane,
    write_contact_sheet,
    write_image,
    write_plane,
)


def test_float_plane_keeps_float32_values(tmp_path):
    depth = np.linspace(0.5, 12.0, 6 * 5).reshape(6, 5)
    write_plane(tmp_path / "d.f32", depth)
    assert plane_shape(tmp_path / "d.f32") == (6, 5, 1)
    restored = read_plane(tmp_path / "d.f32")
    assert restored.shape == (6, 5)
    assert np.array_equal(restored, depth.astype(np.float32).astype(np.float64))
    assert read_plane(tmp_path / "d.f32", squeeze=False).shape == (6, 5, 1)


def test_truncated_plane_is_a_dataset_error(tmp_path):
    write_plane(tmp_path / "f.f32", np.zeros((4, 4, 2)))
    data = (tmp_path / "f.f32").read_bytes()
    (tmp_path / "f.f32").write_bytes(data[:-3])
    with pytest.raises(DatasetError) as err:
        read_plane(tmp_path / "f.f32")
    assert str(tmp_path / "f.f32") in err.value.files


def test_png_image_and_mask(tmp_path):
    image = np.zeros((8, 10, 3))
    image[..., 0] = 1.0
    image[2, 3] = (0.0, 0.5, 1.0)
    write_image(tmp_path / "frame.png", image)
    restored = read_image(tmp_path / "frame.png")
    assert image_size(tmp_path / "frame.png") == (8, 10)
    assert np.allclose(restored, image, atol=1.0 / 255.0)

    mask = np.zeros((8, 10), dtype=bool)
    mask[1:4, 2:6] = True
    write_image(tmp_path / "mask.png", mask.astype(np.float64))
    assert np.array_equal(read_mask(tmp_path / "mask.png"), mask)


def test_unreadable_image_is_a_dataset_error(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        read_image(tmp_path / "broken.png")


def test_contact_sheet_places_views_side_by_side(tmp_path):
    views = [np.full((6, 4, 3), 0.2), np.full((6, 5), 0.9)]
    write_contact_sheet(tmp_path / "sheet.png", views, ["a", "b"])
    assert image_size(tmp_path / "sheet.png") == (6, 9)
