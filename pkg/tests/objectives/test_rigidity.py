import math

import pytest
import torch

from mosplat.core.diffcore import DTYPE, finite_diff_check
from mosplat.models import quaternion as quat
from mosplat.objectives.rigidity import NeighborGraph, build_neighbor_graph, loss_rigid


def test_graph_edges_are_unique_and_ordered(make_gaussians):
    graph = build_neighbor_graph(make_gaussians(30).positions, k=4)
    pairs = {tuple(e) for e in graph.edges.tolist()}
    assert len(pairs) == len(graph)
    assert all(i < j for i, j in pairs)
    assert bool((graph.weights > 0).all()) and bool((graph.weights <= 1).all())


def test_small_sets_are_fully_connected():
    positions = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], dtype=DTYPE)
    graph = build_neighbor_graph(positions, k=8)
    assert sorted(tuple(e) for e in graph.edges.tolist()) == [(0, 1), (0, 2), (1, 2)]
    assert len(build_neighbor_graph(positions[:1])) == 0


def test_identity_deformation_costs_nothing(make_gaussians):
    g = make_gaussians(20)
    graph = build_neighbor_graph(g.positions, k=5)
    assert float(loss_rigid(g, g, graph)) == pytest.approx(0.0, abs=1e-18)


RIGID_MOTIONS = 20


def _rigid_motion(seed):
    g = torch.Generator().manual_seed(seed)
    axis = torch.randn(3, generator=g, dtype=DTYPE)
    angle = float(torch.rand(1, generator=g, dtype=DTYPE)) * math.pi
    return quat.from_axis_angle(axis, angle), torch.randn(3, generator=g, dtype=DTYPE) * 2.0


def _moved(g, turn, shift):
    moved = g.translated(torch.zeros(3, dtype=DTYPE))
    moved.positions = g.positions @ quat.to_matrix(turn).T + shift
    moved.rotations = quat.multiply(turn.reshape(1, 4), g.rotations)
    return moved


@pytest.fixture
def rigid_body(make_gaussians):
    g = make_gaussians(500, seed=3)
    return g, build_neighbor_graph(g.positions)


@pytest.mark.parametrize("seed", range(RIGID_MOTIONS))
def test_global_rigid_motion_costs_nothing(rigid_body, seed):
    g, graph = rigid_body
    turn, shift = _rigid_motion(seed)
    assert len(graph) >= 500
    assert float(loss_rigid(g, _moved(g, turn, shift), graph)) <= 1e-12


@pytest.mark.parametrize("seed", range(RIGID_MOTIONS))
def test_non_rigid_motion_costs_something(rigid_body, seed):
    g, graph = rigid_body
    turn, shift = _rigid_motion(seed)
    moved = _moved(g, turn, shift)
    moved.positions = moved.positions * torch.tensor([1.1, 1.0, 1.0], dtype=DTYPE)
    assert float(loss_rigid(g, moved, graph, lambda_rot=0.0)) > 1e-6
    twisted = _moved(g, turn, shift)
    twisted.rotations[0] = quat.multiply(quat.from_axis_angle([0.0, 0.0, 1.0], 0.3), twisted.rotations[0])
    assert float(loss_rigid(g, twisted, graph)) > 1e-6


def test_stretched_pair_costs_squared_stretch():
    canonical_positions = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=DTYPE)
    from mosplat.models.gaussians import GaussianSet

    canonical = GaussianSet.from_points(canonical_positions, torch.zeros(2, 3, dtype=DTYPE),
                                        torch.full((2,), 0.1, dtype=DTYPE), opacity=0.5, label=0)
    stretched = canonical.translated(torch.zeros(3, dtype=DTYPE))
    stretched.positions = torch.tensor([[0.0, 0.0, 0.0], [1.3, 0.0, 0.0]], dtype=DTYPE)
    graph = NeighborGraph(torch.tensor([[0, 1]]), torch.tensor([1.0], dtype=DTYPE), 1.0)
    assert float(loss_rigid(canonical, stretched, graph, lambda_rot=0.0)) == pytest.approx(0.09, abs=1e-12)


def test_relative_rotation_is_penalized():
    positions = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=DTYPE)
    from mosplat.models.gaussians import GaussianSet

    canonical = GaussianSet.from_points(positions, torch.zeros(2, 3, dtype=DTYPE),
                                        torch.full((2,), 0.1, dtype=DTYPE), opacity=0.5, label=0)
    twisted = canonical.translated(torch.zeros(3, dtype=DTYPE))
    twisted.rotations = torch.stack([quat.identity(1)[0], quat.from_axis_angle([0.0, 0.0, 1.0], 0.2)])
    graph = NeighborGraph(torch.tensor([[0, 1]]), torch.tensor([1.0], dtype=DTYPE), 1.0)
    assert float(loss_rigid(canonical, twisted, graph, lambda_rot=0.5)) == pytest.approx(0.5 * 0.2 ** 2, abs=1e-9)
    assert math.isfinite(float(loss_rigid(canonical, twisted, graph)))


@pytest.mark.parametrize("seed", range(5))
def test_rigid_loss_gradients_match_finite_differences(make_gaussians, seed):
    canonical = make_gaussians(12, seed=seed)
    graph = build_neighbor_graph(canonical.positions, k=4)
    g = torch.Generator().manual_seed(seed)
    deformed = canonical.translated(0.05 * torch.randn(12, 3, generator=g, dtype=DTYPE))
    deformed.rotations = quat.normalize(canonical.rotations + 0.2 * torch.randn(12, 4, generator=g, dtype=DTYPE))
    deformed = deformed.as_parameters()
    params = [deformed.positions, deformed.rotations]
    report = finite_diff_check(lambda: loss_rigid(canonical, deformed, graph), params, atol=1e-5)
    assert report.checked == 12 * 7
    assert not report.non_differentiable
    assert report.max_rel_error <= 1e-3, report.worst
