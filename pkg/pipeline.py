import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

import ground
import mapping
import metrics
import registration
import scan_io
import synth
from config import PipelineConfig, resolve_threads, write_config_echo
from core import PointCloud, ScanSequence
from ground import PlaneFit, PlaneParams
from mapping import BeliefGrid, MapGeometry, MultiLayerGridMap
from synth import SceneSpec

logger = logging.getLogger(__name__)

GROUND_TRUTH_NAME = "ground_truth.txt"
SCENE_NAME = "scene.json"
REGISTRATION_REPORT = "registration.json"
REPORT_NAME = "report.json"

# ключи, по которым evaluate масштабирует тепловые карты в [0, 1]
HEATMAP_SCALES = {"l1": 2.0, "l2": 2.0, "false_o": 1.0, "false_f": 1.0}


def _out_dir(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def voxel_sidecar_path(voxel_path: str) -> str:
    return os.path.splitext(voxel_path)[0] + ".json"


class EvidentialPipeline:
    """Этапы обработки «файл → файл», общий объект для CLI и тестов.

    Каждый этап кладёт в свой выходной каталог config.json с действующей конфигурацией.
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.threads = resolve_threads(self.config)
        self._lock = threading.Lock()

    def _pool(self) -> ThreadPoolExecutor:
        return ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="evigrid")

    def _echo(self, out_dir: str) -> None:
        with self._lock:
            write_config_echo(out_dir, self.config)

    def geometry_for(self, center_xy: Sequence[float]) -> MapGeometry:
        return MapGeometry.centered(center_xy, self.config.map_size, self.config.cell_edge)

    # --- synth ---

    def synth(self, scene: SceneSpec, out_dir: str, rate: Optional[float] = None,
              duration: Optional[float] = None) -> str:
        with self._pool() as pool:
            sim = synth.simulate_sequence(scene, rate, duration, executor=pool)
        manifest = scan_io.write_sequence(out_dir, sim.sequence, sim.labels)
        scan_io.write_poses(os.path.join(out_dir, GROUND_TRUTH_NAME),
                            [s.scan_id for s in sim.sequence.scans], sim.relative_ground_truth())
        scan_io.dump_json(os.path.join(out_dir, SCENE_NAME), scene.model_dump(mode="json"))
        self._echo(out_dir)
        logger.info("Synthetic sequence of %d scans written to %s", len(sim.sequence), out_dir)
        return manifest

    # --- register ---

    def register(self, manifest_path: str, poses_out: str) -> registration.SequenceRegistration:
        seq = scan_io.read_sequence(manifest_path)
        cfg = self.config
        with self._pool() as pool:
            result = registration.register_sequence_report(
                seq, cfg.batch_size, max_distance=cfg.max_correspondence_distance,
                k=cfg.covariance_neighbors, epsilon=cfg.covariance_epsilon, executor=pool)
        out_dir = _out_dir(poses_out)
        os.makedirs(out_dir, exist_ok=True)
        scan_io.write_poses(poses_out, [s.scan_id for s in seq.scans], result.sequence.poses)
        scan_io.dump_json(os.path.join(out_dir, REGISTRATION_REPORT), {
            "batches": [{"converged": b.converged, "iterations": b.iterations,
                         "final_cost": b.final_cost, "correspondences": b.correspondence_count}
                        for b in result.batches],
            "graph": {"converged": result.graph.converged, "iterations": result.graph.iterations,
                      "gradient_norm": result.graph.gradient_norm,
                      "initial_residuals": result.graph.initial_residuals,
                      "final_residuals": result.graph.final_residuals},
        })
        self._echo(out_dir)
        return result

    # --- ground-fit ---

    def load_points(self, path: str, poses_path: Optional[str] = None) -> np.ndarray:
        """Точки одного скана (.evs) или накопление зарегистрированных сканов (манифест + позы)."""
        if path.endswith(".json"):
            if poses_path is None:
                raise ValueError("fitting on a sequence needs a pose file (--poses)")
            return scan_io.read_sequence(path, poses_path).registered_points()
        return scan_io.read_scan(path).xyz

    def ground_fit(self, path: str, plane_out: str, poses_path: Optional[str] = None) -> PlaneFit:
        fit = ground.fit_plane_report(self.load_points(path, poses_path), self.config.plane_scale)
        scan_io.write_plane(plane_out, fit.plane)
        self._echo(_out_dir(plane_out))
        logger.info("Plane fitted in %d iterations: %s", fit.iterations, fit.plane.to_json())
        return fit

    # --- voxelize / project ---

    def _center_geometry(self, seq: ScanSequence, center: str) -> MapGeometry:
        c = seq.index_of(center)
        pose = seq.require_poses()[c]
        return self.geometry_for(pose.apply(seq.scans[c].sensor_origin[None, :])[0, :2])

    def accumulate(self, seq: ScanSequence, center: str) -> Tuple[mapping.WindowMap, MapGeometry]:
        cfg = self.config
        geometry = self._center_geometry(seq, center)
        with self._pool() as pool:
            window_map = mapping.accumulate_window(
                seq, center, cfg.window, voxel_edge=cfg.voxel_edge,
                voxel_origin=(*geometry.origin, 0.0), plane_scale=cfg.plane_scale,
                ground_band=cfg.ground_band, multipath_cutoff=cfg.multipath_cutoff,
                pose_radius=cfg.pose_radius, executor=pool)
        return window_map, geometry

    def voxelize(self, manifest_path: str, poses_path: str, center: str,
                 voxel_out: str) -> mapping.WindowMap:
        seq = scan_io.read_sequence(manifest_path, poses_path)
        window_map, geometry = self.accumulate(seq, center)
        scan_io.write_voxel_map(voxel_out, window_map.voxel_map)
        scan_io.dump_json(voxel_sidecar_path(voxel_out), {
            "center": center,
            "geometry": geometry.to_json(),
            "plane": window_map.plane.to_json(),
            "scans": [seq.scans[i].scan_id for i in window_map.scan_indices],
        })
        self._echo(_out_dir(voxel_out))
        return window_map

    def project_map(self, voxel_map: mapping.EvidentialVoxelMap, plane: PlaneParams,
                    geometry: MapGeometry) -> BeliefGrid:
        cfg = self.config
        corridor = mapping.segment_corridor(voxel_map, plane, cfg.corridor_low, cfg.corridor_high)
        return mapping.project_voxel_map(corridor, geometry, cfg.evidence)

    def project(self, voxel_path: str, out_dir: str, plane_path: Optional[str] = None) -> BeliefGrid:
        voxel_map = scan_io.read_voxel_map(voxel_path)
        sidecar_path = voxel_sidecar_path(voxel_path)
        sidecar = scan_io.load_json(sidecar_path) if os.path.exists(sidecar_path) else {}
        if plane_path is not None:
            plane = scan_io.read_plane(plane_path)
        elif "plane" in sidecar:
            plane = PlaneParams.from_json(sidecar["plane"])
        else:
            raise ValueError(f"no plane for {voxel_path}: pass --plane or keep the voxelize sidecar")
        geometry = (MapGeometry.from_json(sidecar["geometry"]) if "geometry" in sidecar
                    else self.geometry_for((0.0, 0.0)))
        grid = self.project_map(voxel_map, plane, geometry)
        scan_io.write_grid(out_dir, grid)
        self._echo(out_dir)
        return grid

    def target_grid(self, seq: ScanSequence, center: str) -> BeliefGrid:
        window_map, geometry = self.accumulate(seq, center)
        return self.project_map(window_map.voxel_map, window_map.plane, geometry)

    # --- input-grid ---

    def select_scan(self, path: str, scan_id: Optional[str] = None) -> PointCloud:
        if not path.endswith(".json"):
            return scan_io.read_scan(path)
        seq = scan_io.read_sequence(path)
        if scan_id is None:
            raise ValueError("a manifest input needs --scan to pick the scan")
        return seq.scans[seq.index_of(scan_id)]

    def input_grid(self, path: str, out_dir: str, scan_id: Optional[str] = None,
                   plane_path: Optional[str] = None) -> MultiLayerGridMap:
        cfg = self.config
        scan = self.select_scan(path, scan_id)
        plane = (scan_io.read_plane(plane_path) if plane_path
                 else ground.fit_plane(scan.xyz, cfg.plane_scale))
        grid = mapping.build_input_grid(scan, plane, self.geometry_for(scan.sensor_origin[:2]),
                                        ground_band=cfg.ground_band, multipath_cutoff=cfg.multipath_cutoff)
        scan_io.write_grid(out_dir, grid, extra={"scan": scan.scan_id})
        self._echo(out_dir)
        return grid

    # --- augment ---

    def augment(self, grid_dir: str, out_dir: str, rotation: Optional[float] = None,
                offset: Optional[Sequence[float]] = None, seed: Optional[int] = None):
        grid = scan_io.read_grid(grid_dir)
        size = self.config.crop_cells
        if rotation is None and offset is None:
            rng = np.random.default_rng(self.config.seed if seed is None else seed)
            rotation, offset = mapping.random_augmentation(grid.geometry, rng, size)
        rotation = rotation or 0.0
        offset = tuple(offset) if offset is not None else (0.0, 0.0)
        out = mapping.augment_crop(grid, rotation, offset, size)
        scan_io.write_grid(out_dir, out, extra={"rotation": rotation, "offset": list(offset)})
        self._echo(out_dir)
        logger.info("Augmented crop: rotation %.6f rad, offset (%.3f, %.3f) m", rotation, *offset)
        return out

    # --- evaluate / render ---

    def evaluate(self, pred_dir: str, target_dir: str, report_out: Optional[str] = None,
                 heatmap_dir: Optional[str] = None) -> metrics.MetricReport:
        cfg = self.config
        pred = scan_io.read_belief_grid(pred_dir)
        target = scan_io.read_belief_grid(target_dir)
        report = metrics.evaluate(pred, target, k=cfg.certainty_k, asym_k=cfg.asym_k,
                                  asym_sign=cfg.asym_sign)
        if report_out is not None:
            scan_io.dump_json(report_out, report.model_dump(mode="json"))
            self._echo(_out_dir(report_out))
        if heatmap_dir is not None:
            scan_io.write_heatmaps(heatmap_dir, metrics.cell_maps(pred, target), HEATMAP_SCALES)
            self._echo(heatmap_dir)
        return report

    def render(self, grid_dir: str, out_dir: str, layers: Optional[List[str]] = None) -> List[str]:
        written = scan_io.render_grid(out_dir, scan_io.read_grid(grid_dir), layers)
        self._echo(out_dir)
        return written


def load_scene(path: Optional[str] = None, demo: Optional[str] = None,
               seed: Optional[int] = None) -> SceneSpec:
    if (path is None) == (demo is None):
        raise ValueError("give either a scene file or --demo NAME")
    scene = synth.demo_scene(demo) if demo else SceneSpec.model_validate(scan_io.load_json(path))
    if seed is not None:
        scene = scene.model_copy(update={"sensor": scene.sensor.model_copy(update={"seed": seed})})
    return scene
