import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import synth
from core import PointCloud, PoseSE3, ScanSequence, rotation_error_deg, translation_error
from registration import (GicpBatchProblem, PoseGraph, PreparedScan, batch_windows, edge_error,
                          edge_jacobians, gicp_align_pair_residuals, optimize_pose_graph,
                          register_batch, register_sequence, register_sequence_report, retract)
from synth import TrajectoryPoint


def _corridor(**sensor):
    scene = synth.corridor_scene()
    return scene.model_copy(update={"sensor": scene.sensor.model_copy(update=sensor)})


def _corridor_scan(x, y=0.0, yaw=0.0, seed=0, scan_id="s", t=0.0):
    scene = _corridor(seed=seed)
    scene = scene.model_copy(update={"trajectory": [
        TrajectoryPoint(t=0.0, position=(x, y, 1.0), yaw=yaw)]})
    sim = synth.simulate_scan(scene, 0.0, scan_id)
    cloud = PointCloud(sim.cloud.xyz, sim.cloud.intensity, t, scan_id)
    return cloud, sim.pose


def _planar_grid(n=20, spacing=0.1):
    xs, ys = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    return np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])


def _prepared(points, scan_id="p"):
    return PreparedScan.prepare(PointCloud(points, np.zeros(len(points)), 0.0, scan_id))


def _random_pose(rng, scale=2.0):
    return PoseSE3.from_rotation(Rotation.from_rotvec(rng.normal(size=3) * 0.5), rng.normal(size=3) * scale)


# --- остатки GICP ---

def test_identical_clouds_have_zero_residual():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2.0, 2.0, size=(300, 3))
    a = _prepared(pts)
    res = gicp_align_pair_residuals(a, a, PoseSE3.identity())
    assert len(res) == 300
    assert res.cost == 0.0


def test_known_translation_has_zero_residual():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2.0, 2.0, size=(300, 3))
    t = np.array([0.3, -0.2, 0.1])
    res = gicp_align_pair_residuals(_prepared(pts), _prepared(pts + t), PoseSE3.translate(*t))
    assert res.cost < 1e-9


def test_sliding_along_plane_is_almost_free():
    pts = _planar_grid()
    a = _prepared(pts)
    in_plane = gicp_align_pair_residuals(a, _prepared(pts + [0.02, 0.0, 0.0]), PoseSE3.identity())
    normal = gicp_align_pair_residuals(a, _prepared(pts + [0.0, 0.0, 0.02]), PoseSE3.identity())
    assert len(in_plane) == len(normal) == len(pts)
    assert in_plane.cost <= 1e-3 * normal.cost * (1.0 + 1e-6)


def test_no_correspondences_raises():
    pts = _planar_grid()
    with pytest.raises(ValueError):
        gicp_align_pair_residuals(_prepared(pts), _prepared(pts + [0.0, 0.0, 5.0]), PoseSE3.identity())


def test_batch_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1.0, 1.0, size=(60, 3))
    scans = [_prepared(pts + rng.normal(scale=0.02, size=pts.shape), f"s{i}") for i in range(3)]
    poses = [PoseSE3.identity()] + [PoseSE3.from_rotation(Rotation.from_rotvec(rng.normal(size=3) * 0.01),
                                                          rng.normal(size=3) * 0.02) for _ in range(2)]
    problem = GicpBatchProblem(scans, poses, max_distance=1.0)
    links = problem.links(poses)
    r0, jac = problem.residual_jacobian(poses, links)
    h = 1e-6
    for col in range(jac.shape[1]):
        node, k = divmod(col, 6)
        delta = np.zeros(6)
        delta[k] = h
        plus = list(poses)
        minus = list(poses)
        plus[node] = retract(poses[node], delta)
        minus[node] = retract(poses[node], -delta)
        r_plus, _ = problem.residual_jacobian(plus, links)
        r_minus, _ = problem.residual_jacobian(minus, links)
        numeric = (r_plus - r_minus) / (2 * h)
        scale = max(np.abs(jac[:, col]).max(), 1e-6)
        assert np.abs(numeric - jac[:, col]).max() <= 1e-4 * scale


# --- пакетный GICP ---

def test_batch_needs_two_scans():
    with pytest.raises(ValueError):
        GicpBatchProblem([_prepared(_planar_grid())])


def test_pairs_follow_window_topology():
    scans = [_prepared(_planar_grid(), f"s{i}") for i in range(6)]
    assert GicpBatchProblem(scans).pairs == [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]
    assert GicpBatchProblem(scans[:2]).pairs == [(0, 1)]


def test_identical_scans_stay_at_identity():
    cloud, _ = _corridor_scan(2.0)
    prepared = PreparedScan.prepare(cloud)
    result = register_batch(GicpBatchProblem([prepared] * 6))
    assert result.converged
    for pose in result.poses:
        assert pose.allclose(PoseSE3.identity(), atol=1e-9)


def test_pair_recovers_offset_and_yaw():
    a, pose_a = _corridor_scan(2.0, seed=1, scan_id="a")
    b, pose_b = _corridor_scan(2.3, yaw=np.radians(5.0), seed=2, scan_id="b", t=0.1)
    truth = pose_a.inverse().compose(pose_b)
    result = register_batch(GicpBatchProblem([a, b]))
    assert result.poses[0].allclose(PoseSE3.identity(), atol=0.0)
    assert translation_error(result.poses[1], truth) < 0.03
    assert rotation_error_deg(result.poses[1], truth) < 0.5
    for costs in result.step_costs:
        assert all(later <= earlier for earlier, later in zip(costs, costs[1:]))


def test_pair_result_invariant_under_global_transform():
    a, _ = _corridor_scan(2.0, seed=1, scan_id="a")
    b, _ = _corridor_scan(2.3, yaw=np.radians(5.0), seed=2, scan_id="b", t=0.1)
    prepared = [PreparedScan.prepare(a), PreparedScan.prepare(b)]
    plain = register_batch(GicpBatchProblem(prepared))
    g = PoseSE3.from_rotation(Rotation.from_euler("z", 40.0, degrees=True), [3.0, -1.0, 0.5])
    moved = register_batch(GicpBatchProblem(prepared, [g, g]))
    relative = moved.poses[0].inverse().compose(moved.poses[1])
    assert translation_error(relative, plain.poses[1]) < 1e-3
    assert rotation_error_deg(relative, plain.poses[1]) < 1e-2


def test_six_scan_drive_recovers_consecutive_deltas():
    sim = synth.simulate_sequence(_corridor(), duration=5.0)
    truth = sim.relative_ground_truth()
    assert len(truth) == 6
    nudge = PoseSE3.from_xyz_yaw(0.1, -0.08, 0.0, yaw=np.radians(1.0))
    initial = [truth[0]] + [p.compose(nudge) for p in truth[1:]]
    result = register_batch(GicpBatchProblem(sim.sequence.scans, initial))
    for i in range(5):
        got = result.poses[i].inverse().compose(result.poses[i + 1])
        want = truth[i].inverse().compose(truth[i + 1])
        assert translation_error(got, want) < 0.05


# --- граф поз ---

def _chain(rng, n=5):
    observations = [_random_pose(rng, 1.0) for _ in range(n - 1)]
    nodes = [PoseSE3.identity()]
    for obs in observations:
        nodes.append(nodes[-1].compose(obs))
    return nodes, observations


def test_exact_chain_is_fixed_point():
    rng = np.random.default_rng(3)
    nodes, observations = _chain(rng)
    graph = PoseGraph(list(nodes))
    for i, obs in enumerate(observations):
        graph.add_edge(i, i + 1, obs)
    result = optimize_pose_graph(graph)
    assert result.converged
    for got, want in zip(result.poses, nodes):
        assert got.allclose(want, atol=1e-9)


def _square_edges():
    step = PoseSE3.from_xyz_yaw(1.0, 0.0, 0.0, yaw=np.pi / 2)
    return [(0, 1, step), (1, 2, step), (2, 3, step), (3, 0, step)]


def test_square_loop_removes_injected_yaw_error():
    truth = [PoseSE3.identity()]
    edges = _square_edges()
    for _, _, obs in edges[:3]:
        truth.append(truth[-1].compose(obs))
    tilt = PoseSE3.from_xyz_yaw(0.0, 0.0, 0.0, yaw=np.radians(1.0))
    nodes = truth[:2] + [tilt.compose(p) for p in truth[2:]]
    graph = PoseGraph(nodes)
    for i, j, obs in edges:
        graph.add_edge(i, j, obs)
    result = optimize_pose_graph(graph)
    assert result.converged
    assert result.initial_residuals[3] > 0.01
    assert result.final_residuals[3] <= 0.1 * result.initial_residuals[3]
    for got, want in zip(result.poses, truth):
        assert got.allclose(want, atol=1e-6)


def _rotation_loop(eps, duplicate_first=False, first_information=None):
    quarter = PoseSE3.from_xyz_yaw(0.0, 0.0, 0.0, yaw=np.pi / 2)
    closing = PoseSE3.from_xyz_yaw(0.0, 0.0, 0.0, yaw=np.pi / 2 + eps)
    nodes = [PoseSE3.from_xyz_yaw(0.0, 0.0, 0.0, yaw=k * np.pi / 2) for k in range(4)]
    graph = PoseGraph(nodes)
    graph.add_edge(0, 1, quarter, first_information)
    if duplicate_first:
        graph.add_edge(0, 1, quarter)
    graph.add_edge(1, 2, quarter)
    graph.add_edge(2, 3, quarter)
    graph.add_edge(3, 0, closing)
    return graph


def test_inconsistent_loop_spreads_error_evenly():
    eps = np.radians(2.0)
    result = optimize_pose_graph(_rotation_loop(eps))
    assert result.converged
    assert np.allclose(result.final_residuals, eps / 4, atol=1e-6)


def test_duplicate_edges_equal_doubled_information():
    eps = np.radians(2.0)
    doubled = optimize_pose_graph(_rotation_loop(eps, duplicate_first=True))
    weighted = optimize_pose_graph(_rotation_loop(eps, first_information=2.0 * np.eye(6)))
    for a, b in zip(doubled.poses, weighted.poses):
        assert a.allclose(b, atol=1e-9)


def test_disconnected_graph_raises():
    graph = PoseGraph([PoseSE3.identity()] * 4)
    graph.add_edge(0, 1, PoseSE3.identity())
    graph.add_edge(2, 3, PoseSE3.identity())
    with pytest.raises(ValueError):
        optimize_pose_graph(graph)
    with pytest.raises(ValueError):
        graph.add_edge(1, 1, PoseSE3.identity())


def test_singular_normal_equations_raise():
    graph = PoseGraph([PoseSE3.identity()] * 3)
    graph.add_edge(0, 1, PoseSE3.translate(1.0, 0.0, 0.0))
    graph.add_edge(1, 2, PoseSE3.identity(), np.zeros((6, 6)))
    with pytest.raises(ValueError):
        optimize_pose_graph(graph)


def test_edge_jacobians_match_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(10):
        xi, xj = _random_pose(rng), _random_pose(rng)
        noise = PoseSE3.from_rotation(Rotation.from_rotvec(rng.normal(size=3) * 0.2), rng.normal(size=3) * 0.2)
        graph = PoseGraph([xi, xj])
        graph.add_edge(0, 1, xi.inverse().compose(xj).compose(noise))
        edge = graph.edges[0]
        _, jac_i, jac_j = edge_jacobians(edge, xi, xj)
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = h
            num_i = (edge_error(edge, retract(xi, delta), xj) - edge_error(edge, retract(xi, -delta), xj)) / (2 * h)
            num_j = (edge_error(edge, xi, retract(xj, delta)) - edge_error(edge, xi, retract(xj, -delta))) / (2 * h)
            assert np.allclose(num_i, jac_i[:, k], rtol=1e-4, atol=1e-6)
            assert np.allclose(num_j, jac_j[:, k], rtol=1e-4, atol=1e-6)


# --- последовательность ---

def test_batch_windows_share_one_scan():
    assert [list(w) for w in batch_windows(12, 6)] == [[0, 1, 2, 3, 4, 5], [5, 6, 7, 8, 9, 10], [10, 11]]
    assert [list(w) for w in batch_windows(6, 6)] == [[0, 1, 2, 3, 4, 5]]
    assert [list(w) for w in batch_windows(2, 6)] == [[0, 1]]
    with pytest.raises(ValueError):
        batch_windows(5, 1)


def test_static_identical_scans_register_to_identity():
    cloud, _ = _corridor_scan(2.0)
    scans = tuple(PointCloud(cloud.xyz, cloud.intensity, 0.1 * i, f"scan_{i}") for i in range(7))
    registered = register_sequence(ScanSequence(scans))
    for pose in registered.poses:
        assert pose.allclose(PoseSE3.identity(), atol=1e-9)


def test_single_batch_graph_stage_is_noop():
    sim = synth.simulate_sequence(_corridor(), rate=4.0, duration=1.0)
    assert len(sim.sequence) == 5
    report = register_sequence_report(sim.sequence)
    assert len(report.batches) == 1
    for got, want in zip(report.sequence.poses, report.batches[0].poses):
        assert got.allclose(want, atol=1e-9)


@pytest.mark.slow
def test_twelve_scan_drive_matches_ground_truth():
    sim = synth.simulate_sequence(_corridor(), rate=4.0, duration=2.75)
    assert len(sim.sequence) == 12
    registered = register_sequence(sim.sequence)
    for got, want in zip(registered.poses, sim.relative_ground_truth()):
        assert translation_error(got, want) < 0.05
