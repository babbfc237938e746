import math

import numpy as np
import pytest
import torch

from mosplat.core.diffcore import DTYPE
from mosplat.core.errors import MosplatError
from mosplat.models import quaternion as quat
from mosplat.models.camera import Camera, CameraPath, focal_from_fov, look_at
from mosplat.models.geometry import (
    LOW_PASS,
    SH_C0,
    build_covariance,
    degree_from_count,
    evaluate_sh,
    project_gaussian,
    rgb_to_sh_dc,
    sh_coeff_count,
    sh_dc_to_rgb,
)


def test_covariance_of_identity_rotation():
    cov = build_covariance(quat.identity(1), torch.tensor([[1.0, 2.0, 3.0]], dtype=DTYPE))
    assert torch.allclose(cov[0], torch.diag(torch.tensor([1.0, 4.0, 9.0], dtype=DTYPE)))


def test_covariance_of_quarter_turn_about_z():
    q = quat.from_axis_angle([0.0, 0.0, 1.0], math.pi / 2).reshape(1, 4)
    cov = build_covariance(q, torch.tensor([[1.0, 2.0, 1.0]], dtype=DTYPE))
    assert torch.allclose(cov[0], torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=DTYPE)), atol=1e-12)


def test_covariance_is_symmetric_with_squared_scale_determinant():
    q = quat.normalize(torch.tensor([[0.3, -0.5, 0.7, 0.1]], dtype=DTYPE))
    s = torch.tensor([[0.2, 0.5, 1.5]], dtype=DTYPE)
    cov = build_covariance(q, s)[0]
    assert torch.allclose(cov, cov.T, atol=1e-14)
    assert float(torch.linalg.det(cov)) == pytest.approx(float(s.prod() ** 2), rel=1e-10)
    assert bool((torch.linalg.eigvalsh(cov) > 0).all())


def test_covariance_renormalizes_quaternions():
    s = torch.tensor([[0.2, 0.5, 1.5]], dtype=DTYPE)
    q = torch.tensor([[0.3, -0.5, 0.7, 0.1]], dtype=DTYPE)
    assert torch.allclose(build_covariance(q * 4.0, s), build_covariance(q, s), atol=1e-14)


def test_covariance_rejects_zero_scale():
    with pytest.raises(MosplatError):
        build_covariance(quat.identity(1), torch.tensor([[1.0, 0.0, 1.0]], dtype=DTYPE))


def test_on_axis_projection():
    cam = Camera(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
    u, cov2d, z, culled = project_gaussian(torch.tensor([0.0, 0.0, 2.0], dtype=DTYPE), quat.identity(1)[0],
                                           torch.full((3,), 0.1, dtype=DTYPE), cam)
    assert not culled
    assert torch.allclose(u, torch.tensor([64.0, 64.0], dtype=DTYPE))
    assert float(z) == 2.0
    expected = (100.0 * 0.1 / 2.0) ** 2 + LOW_PASS
    assert torch.allclose(cov2d, torch.eye(2, dtype=DTYPE) * expected, atol=1e-12)


def test_gaussian_behind_camera_is_culled():
    cam = Camera(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
    _, _, _, culled = project_gaussian(torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE), quat.identity(1)[0],
                                       torch.full((3,), 0.1, dtype=DTYPE), cam)
    assert culled


def test_quaternion_matrix_round_trip_up_to_sign():
    q = quat.normalize(torch.tensor([-0.2, 0.4, -0.1, 0.8], dtype=DTYPE))
    back = quat.from_matrix(quat.to_matrix(q))
    assert min(float(torch.linalg.norm(back - q)), float(torch.linalg.norm(back + q))) < 1e-12


def test_geodesic_distance_is_sign_invariant():
    q = quat.normalize(torch.tensor([[0.5, 0.1, -0.3, 0.2]], dtype=DTYPE))
    assert float(quat.geodesic_distance(q, -q)[0]) == pytest.approx(0.0, abs=1e-9)
    r = quat.from_axis_angle([1.0, 0.0, 0.0], 0.4).reshape(1, 4)
    assert float(quat.geodesic_distance(quat.identity(1), r)[0]) == pytest.approx(0.4, abs=1e-9)


def test_axis_angle_matrix():
    R = quat.to_matrix(quat.from_axis_angle([0.0, 0.0, 1.0], math.pi / 2))
    assert torch.allclose(R @ torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE),
                          torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE), atol=1e-12)


def test_sh_counts_and_dc_colour():
    assert [sh_coeff_count(d) for d in range(4)] == [1, 4, 9, 16]
    assert degree_from_count(9) == 2
    with pytest.raises(MosplatError):
        degree_from_count(5)
    rgb = torch.tensor([[0.2, 0.5, 0.9]], dtype=DTYPE)
    assert torch.allclose(sh_dc_to_rgb(rgb_to_sh_dc(rgb)), rgb, atol=1e-14)
    sh = torch.zeros(1, 4, 3, dtype=DTYPE)
    sh[:, 0] = rgb_to_sh_dc(rgb)
    colour = evaluate_sh(sh, torch.tensor([[0.3, 0.2, 1.0]], dtype=DTYPE), 1)
    assert torch.allclose(colour + 0.5, rgb, atol=1e-14)
    assert SH_C0 == pytest.approx(0.5 / math.sqrt(math.pi))


def test_camera_rejects_bad_intrinsics_and_poses():
    with pytest.raises(MosplatError):
        Camera(fx=0.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    pose = torch.eye(4, dtype=DTYPE)
    pose[0, 0] = 2.0
    with pytest.raises(MosplatError):
        Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4, world_to_cam=pose)


def test_camera_unproject_inverts_project():
    cam = Camera(fx=50.0, fy=60.0, cx=10.0, cy=12.0, width=20, height=24)
    pixels = torch.tensor([[3.0, 4.0], [19.0, 0.5]], dtype=DTYPE)
    depth = torch.tensor([2.0, 7.5], dtype=DTYPE)
    assert torch.allclose(cam.project(cam.unproject(pixels, depth)), pixels, atol=1e-12)


def test_look_at_centers_the_target():
    pose = look_at([1.0, -0.5, -3.0], [0.0, 0.0, 0.0])
    cam = Camera(fx=50.0, fy=50.0, cx=15.5, cy=15.5, width=32, height=32, world_to_cam=pose)
    uv = cam.project(cam.to_camera(torch.zeros(1, 3, dtype=DTYPE)))
    assert torch.allclose(uv, torch.tensor([[15.5, 15.5]], dtype=DTYPE), atol=1e-9)
    assert torch.allclose(cam.center, torch.tensor([1.0, -0.5, -3.0], dtype=DTYPE), atol=1e-12)


def test_camera_path_file_round_trip(tmp_path):
    pose = look_at([0.5, 0.0, -2.0], [0.0, 0.0, 1.0])
    path = CameraPath(40.0, 41.0, 15.5, 16.0, 32, 33, [torch.eye(4, dtype=DTYPE), pose])
    path.save(tmp_path / "cameras.json")
    loaded = CameraPath.load(tmp_path / "cameras.json")
    assert loaded.num_frames == 2
    assert (loaded.fx, loaded.fy, loaded.cx, loaded.cy, loaded.width, loaded.height) == (40.0, 41.0, 15.5, 16.0, 32, 33)
    assert torch.equal(loaded[1].world_to_cam, pose)


def test_focal_from_fov():
    assert focal_from_fov(128, 90.0) == pytest.approx(64.0)
    assert np.isclose(focal_from_fov(128, 50.0), 64.0 / math.tan(math.radians(25.0)))
