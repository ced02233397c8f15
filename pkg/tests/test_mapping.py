from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import mapping
import synth
from core import PointCloud, PoseSE3, ScanSequence
from evidential import SensorEvidenceConfig, VoxelCounts, combine_counts_array
from ground import PlaneParams
from mapping import (BeliefGrid, EvidentialVoxelMap, MapGeometry, MultiLayerGridMap, augment_crop,
                     build_input_grid, build_target_grid, project_voxel_map, segment_corridor,
                     select_window)
from spatial import traverse_cells_2d, traverse_voxels_3d

FLAT = PlaneParams(np.array([0.0, 0.0, 1.0]), 0.0)
HALF = 0.0625


def _small_sensor(scene, rays=90, channels=8):
    return scene.model_copy(update={"sensor": scene.sensor.model_copy(
        update={"horizontal_rays": rays, "vertical_channels": channels})})


def _single(points, intensity=None, origin=(0.0, 0.0, 0.0), scan_id="s", t=0.0):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    intensity = np.full(len(points), 0.5) if intensity is None else np.asarray(intensity, dtype=float)
    return PointCloud(points, intensity, t, scan_id, np.asarray(origin, dtype=float))


def _occlusion_sequence(duration=0.4):
    scene = _small_sensor(synth.occlusion_scene())
    sim = synth.simulate_sequence(scene, duration=duration)
    return sim.with_ground_truth()


def _random_layers(rng, geometry):
    layers = {}
    for name in mapping.LAYER_NAMES:
        if name.startswith("intensity"):
            layers[name] = rng.uniform(size=geometry.shape)
        else:
            layers[name] = rng.integers(0, 10, size=geometry.shape)
    return MultiLayerGridMap(geometry, layers)


# --- геометрия ---

def test_centered_geometry():
    geo = MapGeometry.centered((10.0, -4.0), 100.0, 0.125)
    assert geo.shape == (800, 800)
    assert geo.origin == (-40.0, -54.0)
    assert np.allclose(geo.center, [10.0, -4.0])
    assert MapGeometry.from_json(geo.to_json()) == geo
    inside, flat = geo.flat_index(np.array([[0, 0], [799, 1], [800, 0], [-1, 5]]))
    assert inside.tolist() == [True, True, False, False]
    assert flat.tolist() == [0, 800 + 799]
    with pytest.raises(ValueError):
        MapGeometry(0, 4, 0.125, (0.0, 0.0))


def test_belief_grid_validation():
    geo = MapGeometry(2, 1, 1.0, (0.0, 0.0))
    with pytest.raises(ValueError):
        BeliefGrid(geo, np.array([[0.7, 0.0]]), np.array([[0.4, 0.0]]))
    with pytest.raises(ValueError):
        BeliefGrid(geo, np.zeros((2, 2)), np.zeros((2, 2)))
    grid = BeliefGrid(geo, np.array([[0.7, 0.0]]), np.array([[0.2, 0.3]]))
    assert np.allclose(grid.uncertainty(), [[0.1, 0.7]])
    assert grid.determinate_cells() == 1
    assert np.array_equal(grid.swapped().bel_o, grid.bel_f)


# --- воксельная карта ---

def test_single_ray_counts():
    vmap = EvidentialVoxelMap(0.125)
    scan = _single([[1.0, 0.0, 0.0]])
    vmap.accumulate_scan(scan, PoseSE3.translate(HALF, HALF, HALF))
    assert vmap.counts((8, 0, 0)) == VoxelCounts(1, 0)
    for i in range(8):
        assert vmap.counts((i, 0, 0)) == VoxelCounts(0, 1)
    assert len(vmap) == 9
    assert vmap.counts((9, 0, 0)) == VoxelCounts()
    assert vmap.points_inserted == vmap.total_reflections == 1


def test_ray_from_voxel_corner_counts_each_voxel_once():
    vmap = EvidentialVoxelMap(0.125)
    vmap.accumulate_scan(_single([[-0.5, -0.3, 0.25]]), PoseSE3.identity())
    passed = traverse_voxels_3d([0.0, 0.0, 0.0], [-0.5, -0.3, 0.25], vmap.grid)[:-1]
    assert len(set(passed)) == len(passed)
    for voxel in passed:
        assert vmap.counts(voxel) == VoxelCounts(0, 1)
    assert len(vmap) == len(passed) + 1
    assert int(vmap.transmissions.sum()) == len(passed)


def test_same_scan_twice_doubles_counts():
    scan = _occlusion_sequence(0.0).scans[0]
    once, twice = EvidentialVoxelMap(), EvidentialVoxelMap()
    once.accumulate_scan(scan, PoseSE3.identity())
    twice.accumulate_scan(scan, PoseSE3.identity())
    twice.accumulate_scan(scan, PoseSE3.identity())
    assert np.array_equal(once.keys, twice.keys)
    assert np.array_equal(2 * once.reflections, twice.reflections)
    assert np.array_equal(2 * once.transmissions, twice.transmissions)


def test_opposing_rays_share_a_voxel():
    vmap = EvidentialVoxelMap(0.125)
    forward = _single([[2.0, 0.0, 0.0]], scan_id="a")
    backward = _single([[-2.0, 0.0, 0.0]], scan_id="b", t=1.0)
    vmap.accumulate_scan(forward, PoseSE3.translate(HALF, HALF, HALF))
    vmap.accumulate_scan(backward, PoseSE3.translate(2.0 + HALF, HALF, HALF))
    assert vmap.counts((8, 0, 0)) == VoxelCounts(0, 2)
    assert vmap.counts((16, 0, 0)) == VoxelCounts(1, 1)
    assert vmap.counts((0, 0, 0)) == VoxelCounts(1, 1)


def test_zero_length_rays_are_skipped():
    vmap = EvidentialVoxelMap()
    vmap.accumulate_scan(_single([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), PoseSE3.identity())
    assert vmap.skipped_rays == 1
    assert vmap.points_inserted == vmap.total_reflections == 1


def test_insertion_order_does_not_matter():
    seq = _occlusion_sequence()
    poses = seq.require_poses()
    forward = EvidentialVoxelMap()
    mapping.accumulate_scans(forward, seq.scans, poses)
    backward = EvidentialVoxelMap()
    mapping.accumulate_scans(backward, seq.scans[::-1], poses[::-1])
    threaded = EvidentialVoxelMap()
    with ThreadPoolExecutor(max_workers=4) as pool:
        mapping.accumulate_scans(threaded, seq.scans, poses, executor=pool)
    for other in (backward, threaded):
        assert np.array_equal(forward.keys, other.keys)
        assert np.array_equal(forward.reflections, other.reflections)
        assert np.array_equal(forward.transmissions, other.transmissions)
    assert forward.total_reflections == sum(len(s) for s in seq.scans)
    assert np.all(forward.reflections + forward.transmissions > 0)


def test_records_round_trip_through_indices():
    seq = _occlusion_sequence(0.0)
    vmap = EvidentialVoxelMap(0.125, (-3.0, -3.0, 0.0))
    vmap.accumulate_scan(seq.scans[0], seq.poses[0])
    copy = EvidentialVoxelMap.from_records(vmap.edge, vmap.origin, vmap.indices(),
                                           vmap.reflections, vmap.transmissions)
    assert np.array_equal(copy.keys, vmap.keys)
    assert np.array_equal(copy.transmissions, vmap.transmissions)


def test_segment_corridor_by_center_height():
    vmap = EvidentialVoxelMap.from_records(0.125, (0.0, 0.0, -HALF),
                                           np.array([[0, 0, 8], [0, 0, 1], [0, 0, 24], [0, 0, 25]]),
                                           np.ones(4, dtype=int), np.zeros(4, dtype=int))
    kept = segment_corridor(vmap, FLAT)
    assert sorted(kept.indices()[:, 2].tolist()) == [8, 24]
    with pytest.raises(ValueError):
        segment_corridor(vmap, FLAT, 2.0, 1.0)


def test_corridor_drops_ground_and_keeps_box_bodies():
    scene = _small_sensor(synth.static_scene(), rays=180, channels=16)
    sim = synth.simulate_scan(scene, 0.0)
    vmap = EvidentialVoxelMap()
    vmap.accumulate_scan(sim.cloud, sim.pose)
    corridor = segment_corridor(vmap, FLAT)
    world = sim.pose.apply(sim.cloud.xyz)
    kept = set(map(int, corridor.keys))

    ground_keys = mapping._encode(vmap.grid.index_of(world[sim.labels == synth.LABEL_GROUND]))
    assert not kept.intersection(map(int, ground_keys))
    body = (sim.labels > synth.LABEL_GROUND) & (world[:, 2] > 0.3) & (world[:, 2] < 2.9)
    assert body.any()
    body_keys = mapping._encode(vmap.grid.index_of(world[body]))
    assert set(map(int, body_keys)) <= kept


# --- окно и целевая сетка ---

def test_select_window_by_time_and_radius():
    seq = _occlusion_sequence(1.0)
    assert select_window(seq, "scan_0005", 0.25) == [3, 4, 5, 6, 7]
    assert select_window(seq, "scan_0000", 0.0) == [0]
    # сенсор едет 2 м/с, шаг 0.2 м
    assert select_window(seq, "scan_0005", 0.0, pose_radius=0.45) == [3, 4, 5, 6, 7]
    with pytest.raises(ValueError):
        select_window(seq, "missing", 1.0)


def test_project_voxel_map_uses_stored_pillars():
    geo = MapGeometry(4, 4, 0.125, (0.0, 0.0))
    vmap = EvidentialVoxelMap.from_records(
        0.125, (0.0, 0.0, 0.0),
        np.array([[1, 2, 3], [1, 2, 5], [3, 0, 4], [9, 9, 4]]),
        np.array([1, 1, 0, 1]), np.array([0, 0, 3, 0]))
    grid = project_voxel_map(vmap, geo)
    assert np.isclose(grid.bel_o[2, 1], 0.64)
    assert grid.bel_f[2, 1] == 0.0
    _, m_f, _ = combine_counts_array(np.array([0]), np.array([3]), SensorEvidenceConfig())
    assert np.isclose(grid.bel_f[0, 3], m_f[0])
    untouched = np.ones(geo.shape, dtype=bool)
    untouched[2, 1] = untouched[0, 3] = False
    assert np.all(grid.bel_o[untouched] == 0.0) and np.all(grid.bel_f[untouched] == 0.0)


def test_single_scan_target_grid():
    scene = _small_sensor(synth.static_scene(), rays=180, channels=16)
    sim = synth.simulate_sequence(scene, duration=0.0)
    seq = sim.with_ground_truth()
    geo = MapGeometry.centered((0.0, 0.0), 30.0, 0.125)
    grid = build_target_grid(seq, "scan_0000", 2.0, geo)
    assert grid.geometry == geo
    assert np.all(grid.bel_o + grid.bel_f <= 1.0 + 1e-12)

    window = mapping.accumulate_window(seq, "scan_0000", 2.0, voxel_origin=(*geo.origin, 0.0))
    corridor = segment_corridor(window.voxel_map, window.plane)
    pure = (corridor.reflections > 0) & (corridor.transmissions == 0)
    cells = geo.grid.index_of(corridor.centers()[pure, :2])
    inside, flat = geo.flat_index(cells)
    assert len(flat) > 0
    assert np.all(grid.bel_o.reshape(-1)[flat] >= 0.4 - 1e-12)

    seen = np.zeros(geo.shape[0] * geo.shape[1], dtype=bool)
    seen[geo.flat_index(geo.grid.index_of(corridor.centers()[:, :2]))[1]] = True
    unseen = ~seen.reshape(geo.shape)
    assert np.all(grid.bel_o[unseen] == 0.0) and np.all(grid.bel_f[unseen] == 0.0)


def test_multipath_points_are_not_inserted():
    xs, ys = np.meshgrid(np.linspace(1.0, 5.0, 9), np.linspace(-3.0, 3.0, 7))
    ground_pts = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, -2.0)])
    scan = _single(np.vstack([ground_pts, [[4.0, 0.5, -3.0]]]))
    seq = ScanSequence((scan,)).with_poses([PoseSE3.translate(0.0, 0.0, 2.0)])
    window = mapping.accumulate_window(seq, "s", 0.0)
    assert window.voxel_map.points_inserted == len(ground_pts)
    assert abs(window.plane.d) < 0.01
    assert window.scan_indices == [0]


# --- входная сетка ---

INPUT_GEO = MapGeometry(32, 32, 0.125, (-2.0, -2.0))


def test_single_non_ground_point():
    scan = _single([[1.0, 0.0, 1.0]], origin=(0.0, 0.0, 1.5))
    grid = build_input_grid(scan, FLAT, INPUT_GEO)
    assert grid["detections_non_ground"].sum() == 1
    assert grid["detections_non_ground"][16, 24] == 1
    trans = grid["transmissions_non_ground"]
    assert trans.sum() == 8
    assert np.all(trans[16, 16:24] == 1)
    for name in ("detections_ground", "transmissions_ground", "intensity_ground"):
        assert grid[name].sum() == 0
    assert grid["intensity_non_ground"][16, 24] == 0.5


def test_transmissions_from_sensor_on_cell_corner():
    # чётное число ячеек: сенсор в центре карты попадает точно в узел решётки
    geo = MapGeometry.centered((0.0, 0.0), 2.0, 0.125)
    scan = _single([[-0.5, -0.3, 1.0]], origin=(0.0, 0.0, 1.5))
    grid = build_input_grid(scan, FLAT, geo)
    expected = np.zeros(geo.shape, dtype=np.int64)
    for ix, iy in traverse_cells_2d([0.0, 0.0], [-0.5, -0.3], geo.grid)[:-1]:
        expected[iy, ix] += 1
    assert expected.max() == 1
    assert np.array_equal(grid["transmissions_non_ground"], expected)
    assert grid["transmissions_non_ground"][7, 7] == 1


def test_intensity_is_mean_of_detections():
    scan = _single([[1.01, 0.01, 1.0], [1.05, 0.05, 1.2]], intensity=[0.2, 0.6], origin=(0.0, 0.0, 1.5))
    grid = build_input_grid(scan, FLAT, INPUT_GEO)
    assert grid["detections_non_ground"][16, 24] == 2
    assert np.isclose(grid["intensity_non_ground"][16, 24], 0.4)
    assert grid["transmissions_non_ground"][16, 16:24].tolist() == [2] * 8


def test_ground_and_non_ground_families_are_disjoint():
    scene = _small_sensor(synth.static_scene(), rays=180, channels=16)
    sim = synth.simulate_scan(scene, 0.0)
    plane = PlaneParams(np.array([0.0, 0.0, 1.0]), 2.0)
    geo = MapGeometry.centered((0.0, 0.0), 40.0, 0.125)
    grid = build_input_grid(sim.cloud, plane, geo)
    heights = plane.signed_height(sim.cloud.xyz)
    inside, _ = geo.flat_index(geo.grid.index_of(sim.cloud.xyz[:, :2]))
    ground_pts = int(np.count_nonzero(inside & (heights >= -0.2) & (heights <= 0.2)))
    non_ground_pts = int(np.count_nonzero(inside & (heights > 0.2)))
    assert grid["detections_ground"].sum() == ground_pts
    assert grid["detections_non_ground"].sum() == non_ground_pts
    assert ground_pts > 0 and non_ground_pts > 0
    for name in mapping.LAYER_NAMES:
        assert grid[name].shape == geo.shape


def test_wall_shadow_has_no_evidence():
    scene = synth.SceneSpec(
        boxes=[synth.BoxSpec(center=(5.25, 0.0, 2.0), size=(0.5, 6.0, 4.0))],
        trajectory=[synth.TrajectoryPoint(t=0.0, position=(0.0, 0.0, 2.0))],
        sensor=synth.SensorSpec(horizontal_rays=720, vertical_channels=16, vertical_fov=(-25.0, 5.0)),
    )
    sim = synth.simulate_scan(scene, 0.0)
    geo = MapGeometry.centered((0.0, 0.0), 20.0, 0.125)
    grid = build_input_grid(sim.cloud, PlaneParams(np.array([0.0, 0.0, 1.0]), 2.0), geo)
    xs = geo.grid.center_of(np.column_stack([np.arange(geo.width), np.zeros(geo.width, dtype=int)]))[:, 0]
    ys = geo.grid.center_of(np.column_stack([np.zeros(geo.height, dtype=int), np.arange(geo.height)]))[:, 1]
    shadow = np.outer((np.abs(ys) < 1.0), (xs > 6.0) & (xs < 9.0))
    assert shadow.any()
    for name in mapping.LAYER_NAMES:
        if not name.startswith("intensity"):
            assert grid[name][shadow].sum() == 0
    in_front = np.outer(np.abs(ys) < 1.0, (xs > 1.0) & (xs < 4.5))
    assert grid["transmissions_ground"][in_front].sum() > 0


# --- аугментация ---

def test_augment_identity_and_quarter_turns():
    rng = np.random.default_rng(0)
    geo = MapGeometry(8, 8, 0.125, (0.0, 0.0))
    grid = _random_layers(rng, geo)
    same = augment_crop(grid, 0.0, (0.0, 0.0), 8)
    assert np.allclose(same.geometry.origin, geo.origin)
    for name in mapping.LAYER_NAMES:
        assert np.array_equal(same[name], grid[name])
    turned = grid
    for _ in range(4):
        turned = augment_crop(turned, np.pi / 2, (0.0, 0.0), 8)
    for name in mapping.LAYER_NAMES:
        assert np.array_equal(turned[name], grid[name])
    once = augment_crop(grid, np.pi / 2, (0.0, 0.0), 8)
    assert not np.array_equal(once["detections_ground"], grid["detections_ground"])
    assert once["detections_ground"].dtype == grid["detections_ground"].dtype


def test_augment_half_turn_preserves_sums():
    rng = np.random.default_rng(1)
    geo = MapGeometry(10, 10, 0.125, (-1.0, 2.0))
    bel_o = rng.uniform(0.0, 0.5, size=geo.shape)
    bel_f = rng.uniform(0.0, 0.5, size=geo.shape)
    grid = BeliefGrid(geo, bel_o, bel_f)
    turned = augment_crop(grid, np.pi, (0.0, 0.0), 10)
    assert isinstance(turned, BeliefGrid)
    assert np.isclose(turned.bel_o.sum(), bel_o.sum())
    assert np.isclose(turned.bel_f.sum(), bel_f.sum())


def test_augment_offset_shifts_window():
    src = np.arange(64, dtype=float).reshape(8, 8) / 128.0
    grid = BeliefGrid(MapGeometry(8, 8, 0.125, (0.0, 0.0)), src, np.zeros((8, 8)))
    crop = augment_crop(grid, 0.0, (0.125, 0.0), 4)
    assert np.array_equal(crop.bel_o, src[2:6, 3:7])
    assert np.allclose(crop.geometry.origin, (0.375, 0.25))


def test_augment_outside_source_raises():
    grid = BeliefGrid.empty(MapGeometry(8, 8, 0.125, (0.0, 0.0)))
    with pytest.raises(ValueError):
        augment_crop(grid, np.pi / 4, (0.0, 0.0), 8)
    with pytest.raises(ValueError):
        augment_crop(grid, 0.0, (0.5, 0.0), 6)


def test_random_augmentation_stays_inside():
    geo = MapGeometry(64, 64, 0.125, (0.0, 0.0))
    grid = BeliefGrid.empty(geo)
    rng = np.random.default_rng(5)
    for _ in range(50):
        rotation, offset = mapping.random_augmentation(geo, rng, 32)
        crop = augment_crop(grid, rotation, offset, 32)
        assert crop.geometry.shape == (32, 32)
    with pytest.raises(ValueError):
        mapping.random_augmentation(geo, rng, 64)


# --- сценарии ---

@pytest.mark.slow
def test_moving_box_is_more_uncertain_than_static_box():
    scene = synth.moving_box_scene()
    sim = synth.simulate_sequence(scene, rate=5.0)
    seq = sim.with_ground_truth()
    center = "scan_0010"
    geo = MapGeometry.centered((0.0, 0.0), 40.0, 0.125)
    grid = build_target_grid(seq, center, 2.0, geo)
    theta = grid.uncertainty()

    frame = sim.ground_truth[0]
    swept = synth.swept_cells(scene, 0.0, scene.span, geo, frame)
    names = scene.label_names()
    # box_0: дальняя стена
    static_labels = [label for label in scene.static_object_labels() if names[label] != "box_0"]
    points = np.concatenate([p.apply(s.xyz) for p, s in zip(seq.poses, seq.scans)])
    labels = np.concatenate(sim.labels)
    static_cells = synth.labeled_cells(points, labels, static_labels, geo)
    assert len(swept) > 0 and len(static_cells) > 0
    swept_theta = theta[swept[:, 1], swept[:, 0]].mean()
    static_theta = theta[static_cells[:, 1], static_cells[:, 0]].mean()
    assert swept_theta > static_theta
    assert swept_theta >= 1.5 * static_theta


@pytest.mark.slow
def test_window_densifies_target_grid():
    scene = synth.occlusion_scene()
    sim = synth.simulate_sequence(scene, rate=5.0)
    seq = sim.with_ground_truth()
    geo = MapGeometry.centered((4.0, 0.0), 40.0, 0.125)
    multi = build_target_grid(seq, "scan_0010", 2.0, geo)
    single = build_target_grid(seq, "scan_0010", 0.0, geo)
    assert multi.determinate_cells() >= 1.2 * single.determinate_cells()
