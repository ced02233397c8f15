"""Карты: эвиденциальная воксельная 3D-карта, целевая 2D-сетка убеждений,
шестислойная входная сетка одного скана и аугментация поворотом/сдвигом с кропом.

Раскладка 2D-массивов: [iy, ix]: строка соответствует оси y, столбец оси x.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import evidential
import ground
from core import PointCloud, PoseSE3, ScanSequence
from evidential import SensorEvidenceConfig, VoxelCounts
from ground import PlaneParams
from spatial import GridGeometry, iter_ray_cells

logger = logging.getLogger(__name__)

DEFAULT_EDGE = 0.125
DEFAULT_MAP_SIZE = 100.0
DEFAULT_CROP_CELLS = 512
DEFAULT_WINDOW = 2.0
CORRIDOR_LOW = 0.2
CORRIDOR_HIGH = 3.0
DETERMINATE_THRESHOLD = 0.5

LAYER_NAMES = (
    "detections_ground",
    "detections_non_ground",
    "transmissions_ground",
    "transmissions_non_ground",
    "intensity_ground",
    "intensity_non_ground",
)
BELIEF_LAYERS = ("bel_o", "bel_f")

# упаковка индекса вокселя в int64: по 21 бит на ось со смещением
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


@dataclass(frozen=True)
class MapGeometry:
    width: int
    height: int
    edge: float
    origin: Tuple[float, float]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid size must be positive, got {self.width}x{self.height}")
        if not self.edge > 0:
            raise ValueError(f"cell edge must be positive, got {self.edge}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "edge", float(self.edge))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, center_xy: Sequence[float], size_m: float = DEFAULT_MAP_SIZE,
                 edge: float = DEFAULT_EDGE) -> "MapGeometry":
        cells = int(round(size_m / edge))
        half = cells * edge / 2.0
        return cls(cells, cells, edge, (float(center_xy[0]) - half, float(center_xy[1]) - half))

    @property
    def grid(self) -> GridGeometry:
        return GridGeometry(self.edge, self.origin)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def center(self) -> np.ndarray:
        return np.array(self.origin) + 0.5 * self.edge * np.array([self.width, self.height])

    def flat_index(self, cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(маска попадания в сетку, плоский индекс iy*width + ix для попавших)."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        inside = ((cells[:, 0] >= 0) & (cells[:, 0] < self.width)
                  & (cells[:, 1] >= 0) & (cells[:, 1] < self.height))
        return inside, cells[inside, 1] * self.width + cells[inside, 0]

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "cell_edge": self.edge,
                "origin": list(self.origin)}

    @classmethod
    def from_json(cls, data: dict) -> "MapGeometry":
        return cls(data["width"], data["height"], data["cell_edge"], tuple(data["origin"]))


@dataclass(frozen=True)
class BeliefGrid:
    geometry: MapGeometry
    bel_o: np.ndarray
    bel_f: np.ndarray

    def __post_init__(self):
        bel_o = np.asarray(self.bel_o, dtype=np.float64)
        bel_f = np.asarray(self.bel_f, dtype=np.float64)
        for name, arr in (("bel_o", bel_o), ("bel_f", bel_f)):
            if arr.shape != self.geometry.shape:
                raise ValueError(f"{name} shape {arr.shape} != grid shape {self.geometry.shape}")
            if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        if np.any(bel_o + bel_f > 1.0 + 1e-12):
            raise ValueError("bel_o + bel_f exceeds 1")
        object.__setattr__(self, "bel_o", bel_o)
        object.__setattr__(self, "bel_f", bel_f)

    @classmethod
    def empty(cls, geometry: MapGeometry) -> "BeliefGrid":
        return cls(geometry, np.zeros(geometry.shape), np.zeros(geometry.shape))

    @property
    def layers(self) -> Dict[str, np.ndarray]:
        return {"bel_o": self.bel_o, "bel_f": self.bel_f}

    def uncertainty(self) -> np.ndarray:
        return np.clip(1.0 - self.bel_o - self.bel_f, 0.0, 1.0)

    def determinate_cells(self, threshold: float = DETERMINATE_THRESHOLD) -> int:
        return int(np.count_nonzero(self.bel_o + self.bel_f > threshold))

    def swapped(self) -> "BeliefGrid":
        return BeliefGrid(self.geometry, self.bel_f, self.bel_o)


@dataclass(frozen=True)
class MultiLayerGridMap:
    geometry: MapGeometry
    layers: Dict[str, np.ndarray]

    def __post_init__(self):
        if set(self.layers) != set(LAYER_NAMES):
            raise ValueError(f"input grid needs layers {LAYER_NAMES}, got {sorted(self.layers)}")
        for name, arr in self.layers.items():
            if arr.shape != self.geometry.shape:
                raise ValueError(f"layer {name} shape {arr.shape} != grid shape {self.geometry.shape}")
            if name.startswith("intensity"):
                if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
                    raise ValueError(f"layer {name} must lie in [0, 1]")
            elif arr.min(initial=0) < 0:
                raise ValueError(f"layer {name} must be non-negative")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]


GridLike = Union[BeliefGrid, MultiLayerGridMap]


# --- воксельная карта --------------------------------------------------------

def _encode(indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if indices.size and (indices.min() < -_KEY_OFFSET or indices.max() >= _KEY_OFFSET):
        raise ValueError("voxel index out of the representable range; move the map origin")
    shifted = indices + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def _decode(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (keys >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = keys & _KEY_MASK
    return out - _KEY_OFFSET


@dataclass(frozen=True)
class ScanCounts:
    """Вклад одного скана: уникальные ключи вокселей и счётчики m, n."""

    keys: np.ndarray
    m: np.ndarray
    n: np.ndarray
    points: int
    skipped: int


class EvidentialVoxelMap:
    """Разреженная карта VoxelIndex → (m, n); хранятся только воксели с m + n > 0.

    Ключи держатся отсортированными, счётчики целые, поэтому итог не зависит от порядка сканов.
    """

    def __init__(self, edge: float = DEFAULT_EDGE, origin: Sequence[float] = (0.0, 0.0, 0.0)):
        self.grid = GridGeometry(edge, tuple(origin))
        if self.grid.ndim != 3:
            raise ValueError("voxel map origin must be 3D")
        self._keys = np.zeros(0, dtype=np.int64)
        self._m = np.zeros(0, dtype=np.int64)
        self._n = np.zeros(0, dtype=np.int64)
        self.points_inserted = 0
        self.skipped_rays = 0

    @property
    def edge(self) -> float:
        return self.grid.edge

    @property
    def origin(self) -> Tuple[float, ...]:
        return self.grid.origin

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def indices(self) -> np.ndarray:
        return _decode(self._keys)

    @property
    def reflections(self) -> np.ndarray:
        return self._m

    @property
    def transmissions(self) -> np.ndarray:
        return self._n

    @property
    def total_reflections(self) -> int:
        return int(self._m.sum())

    def centers(self) -> np.ndarray:
        return self.grid.center_of(self.indices())

    def counts(self, index: Sequence[int]) -> VoxelCounts:
        key = _encode(np.asarray(index).reshape(1, 3))[0]
        pos = int(np.searchsorted(self._keys, key))
        if pos < len(self._keys) and self._keys[pos] == key:
            return VoxelCounts(int(self._m[pos]), int(self._n[pos]))
        return VoxelCounts()

    def add_counts(self, keys: np.ndarray, m: np.ndarray, n: np.ndarray) -> None:
        all_keys = np.concatenate([self._keys, np.asarray(keys, dtype=np.int64)])
        if len(all_keys) == 0:
            return
        unique, inverse = np.unique(all_keys, return_inverse=True)
        self._m = np.bincount(inverse, weights=np.concatenate([self._m, m]),
                              minlength=len(unique)).astype(np.int64)
        self._n = np.bincount(inverse, weights=np.concatenate([self._n, n]),
                              minlength=len(unique)).astype(np.int64)
        self._keys = unique
        keep = (self._m + self._n) > 0
        if not keep.all():
            self._keys, self._m, self._n = self._keys[keep], self._m[keep], self._n[keep]

    def merge_scan(self, contribution: ScanCounts) -> None:
        self.add_counts(contribution.keys, contribution.m, contribution.n)
        self.points_inserted += contribution.points
        self.skipped_rays += contribution.skipped

    def scan_counts(self, scan: PointCloud, pose: PoseSE3) -> ScanCounts:
        """Лучи от начала сенсора до каждой точки: n += 1 до конечного вокселя, m += 1 в нём."""
        endpoints = pose.apply(scan.xyz)
        origin = pose.apply(scan.sensor_origin[None, :])[0]
        valid = np.any(endpoints != origin, axis=1)
        skipped = int(len(endpoints) - np.count_nonzero(valid))
        if skipped:
            logger.warning("Scan %s: %d zero-length rays skipped", scan.scan_id, skipped)
        endpoints = endpoints[valid]

        refl_keys = _encode(self.grid.index_of(endpoints))
        key_parts = [refl_keys]
        m_parts = [np.ones(len(refl_keys), dtype=np.int64)]
        n_parts = [np.zeros(len(refl_keys), dtype=np.int64)]
        for _, cells in iter_ray_cells(origin, endpoints, self.grid, include_end=False):
            chunk_keys, chunk_n = np.unique(_encode(cells), return_counts=True)
            key_parts.append(chunk_keys)
            m_parts.append(np.zeros(len(chunk_keys), dtype=np.int64))
            n_parts.append(chunk_n.astype(np.int64))

        keys = np.concatenate(key_parts)
        unique, inverse = np.unique(keys, return_inverse=True)
        m = np.bincount(inverse, weights=np.concatenate(m_parts), minlength=len(unique)).astype(np.int64)
        n = np.bincount(inverse, weights=np.concatenate(n_parts), minlength=len(unique)).astype(np.int64)
        return ScanCounts(unique, m, n, len(endpoints), skipped)

    def accumulate_scan(self, scan: PointCloud, pose: PoseSE3) -> None:
        self.merge_scan(self.scan_counts(scan, pose))

    def masses(self, cfg: SensorEvidenceConfig = SensorEvidenceConfig()):
        return evidential.combine_counts_array(self._m, self._n, cfg)

    def subset(self, mask: np.ndarray) -> "EvidentialVoxelMap":
        out = EvidentialVoxelMap(self.edge, self.origin)
        out._keys, out._m, out._n = self._keys[mask], self._m[mask], self._n[mask]
        out.points_inserted = self.points_inserted
        out.skipped_rays = self.skipped_rays
        return out

    @classmethod
    def from_records(cls, edge: float, origin: Sequence[float], indices: np.ndarray,
                     m: np.ndarray, n: np.ndarray) -> "EvidentialVoxelMap":
        out = cls(edge, origin)
        out.add_counts(_encode(indices), np.asarray(m, dtype=np.int64), np.asarray(n, dtype=np.int64))
        out.points_inserted = int(out._m.sum())
        return out


def accumulate_scan(voxel_map: EvidentialVoxelMap, scan: PointCloud, pose: PoseSE3) -> None:
    voxel_map.accumulate_scan(scan, pose)


def accumulate_scans(voxel_map: EvidentialVoxelMap, scans: Sequence[PointCloud],
                     poses: Sequence[PoseSE3], executor: Optional[Executor] = None) -> None:
    """Параллельно по сканам; слияние целочисленное, поэтому порядок не важен."""
    mapper = executor.map if executor is not None else map
    for contribution in mapper(voxel_map.scan_counts, scans, poses):
        voxel_map.merge_scan(contribution)


def segment_corridor(voxel_map: EvidentialVoxelMap, plane: PlaneParams,
                     low: float = CORRIDOR_LOW, high: float = CORRIDOR_HIGH) -> EvidentialVoxelMap:
    if low > high:
        raise ValueError(f"corridor bounds inverted: {low} > {high}")
    heights = plane.signed_height(voxel_map.centers()) if len(voxel_map) else np.zeros(0)
    return voxel_map.subset((heights >= low) & (heights <= high))


# --- целевая сетка ------------------------------------------------------------

def select_window(seq: ScanSequence, center: str, window: float = DEFAULT_WINDOW,
                  pose_radius: Optional[float] = None) -> List[int]:
    """Индексы сканов вокруг центрального: по времени |t - t_c| ≤ window
    либо, если задан pose_radius, по расстоянию между положениями сенсора."""
    c = seq.index_of(center)
    if pose_radius is not None:
        poses = seq.require_poses()
        origins = np.array([p.apply(s.sensor_origin[None, :])[0] for p, s in zip(poses, seq.scans)])
        selected = np.nonzero(np.linalg.norm(origins - origins[c], axis=1) <= pose_radius)[0]
    else:
        selected = np.nonzero(np.abs(seq.timestamps - seq.timestamps[c]) <= window)[0]
    if len(selected) == 0:
        raise ValueError(f"no scans in the window around {center!r}")
    return selected.tolist()


@dataclass
class WindowMap:
    voxel_map: EvidentialVoxelMap
    plane: PlaneParams
    scan_indices: List[int]
    center_xy: Tuple[float, float]


def accumulate_window(seq: ScanSequence, center: str, window: float = DEFAULT_WINDOW, *,
                      voxel_edge: float = DEFAULT_EDGE, voxel_origin: Optional[Sequence[float]] = None,
                      plane_scale: float = ground.DEFAULT_SCALE,
                      ground_band: float = ground.DEFAULT_GROUND_BAND,
                      multipath_cutoff: float = ground.DEFAULT_MULTIPATH_CUTOFF,
                      pose_radius: Optional[float] = None,
                      executor: Optional[Executor] = None) -> WindowMap:
    """Воксельная карта окна: плоскость по накопленным точкам, отброс многолучевых, лучи."""
    poses = seq.require_poses()
    indices = select_window(seq, center, window, pose_radius)
    plane = ground.fit_plane(seq.registered_points(indices), plane_scale)

    c = seq.index_of(center)
    center_xy = tuple(poses[c].apply(seq.scans[c].sensor_origin[None, :])[0, :2].tolist())
    voxel_map = EvidentialVoxelMap(voxel_edge, voxel_origin if voxel_origin is not None else (0.0, 0.0, 0.0))
    kept_scans, kept_poses = [], []
    for i in indices:
        scan, pose = seq.scans[i], poses[i]
        heights = plane.signed_height(pose.apply(scan.xyz))
        labels = ground.classify_heights(heights, ground_band, multipath_cutoff)
        kept_scans.append(scan.subset(labels != ground.LABEL_DISCARDED))
        kept_poses.append(pose)
    accumulate_scans(voxel_map, kept_scans, kept_poses, executor)
    logger.info("Window around %s: %d scans, %d voxels, %d reflections",
                center, len(indices), len(voxel_map), voxel_map.total_reflections)
    return WindowMap(voxel_map, plane, indices, center_xy)


def project_voxel_map(voxel_map: EvidentialVoxelMap, geometry: MapGeometry,
                      cfg: SensorEvidenceConfig = SensorEvidenceConfig()) -> BeliefGrid:
    """Столбцы сохранённых вокселей над каждой ячейкой → (bel_O, bel_F); у пустых (0, 0)."""
    bel_o = np.zeros(geometry.height * geometry.width)
    bel_f = np.zeros(geometry.height * geometry.width)
    if len(voxel_map):
        cells = geometry.grid.index_of(voxel_map.centers()[:, :2])
        inside, flat = geometry.flat_index(cells)
        m_o, m_f, _ = voxel_map.masses(cfg)
        order = np.argsort(flat, kind="stable")
        groups, pillar_o, pillar_f = evidential.project_pillars(
            flat[order], m_o[inside][order], m_f[inside][order])
        bel_o[groups] = pillar_o
        bel_f[groups] = pillar_f
    return BeliefGrid(geometry, bel_o.reshape(geometry.shape), bel_f.reshape(geometry.shape))


def build_target_grid(seq: ScanSequence, center: str, window: float = DEFAULT_WINDOW,
                      geometry: Optional[MapGeometry] = None, *,
                      cfg: SensorEvidenceConfig = SensorEvidenceConfig(),
                      voxel_edge: Optional[float] = None,
                      corridor: Tuple[float, float] = (CORRIDOR_LOW, CORRIDOR_HIGH),
                      plane_scale: float = ground.DEFAULT_SCALE,
                      ground_band: float = ground.DEFAULT_GROUND_BAND,
                      multipath_cutoff: float = ground.DEFAULT_MULTIPATH_CUTOFF,
                      pose_radius: Optional[float] = None,
                      executor: Optional[Executor] = None) -> BeliefGrid:
    poses = seq.require_poses()
    c = seq.index_of(center)
    if geometry is None:
        center_xy = poses[c].apply(seq.scans[c].sensor_origin[None, :])[0, :2]
        geometry = MapGeometry.centered(center_xy)
    edge = voxel_edge if voxel_edge is not None else geometry.edge
    window_map = accumulate_window(
        seq, center, window, voxel_edge=edge, voxel_origin=(*geometry.origin, 0.0),
        plane_scale=plane_scale, ground_band=ground_band, multipath_cutoff=multipath_cutoff,
        pose_radius=pose_radius, executor=executor)
    corridor_map = segment_corridor(window_map.voxel_map, window_map.plane, *corridor)
    return project_voxel_map(corridor_map, geometry, cfg)


# --- входная сетка -------------------------------------------------------------

def build_input_grid(scan: PointCloud, plane: PlaneParams, geometry: Optional[MapGeometry] = None, *,
                     ground_band: float = ground.DEFAULT_GROUND_BAND,
                     multipath_cutoff: float = ground.DEFAULT_MULTIPATH_CUTOFF) -> MultiLayerGridMap:
    """Шесть слоёв: детекции, прохождения и средняя интенсивность для земли и не-земли.

    Лучи идут в проекции на плоскость сетки; семейства земли и не-земли не смешиваются.
    """
    if geometry is None:
        geometry = MapGeometry.centered(scan.sensor_origin[:2])
    labels = ground.classify_heights(plane.signed_height(scan.xyz), ground_band, multipath_cutoff)
    origin_xy = scan.sensor_origin[:2]
    size = geometry.width * geometry.height
    layers: Dict[str, np.ndarray] = {}
    for family, label in (("ground", ground.LABEL_GROUND), ("non_ground", ground.LABEL_NON_GROUND)):
        mask = labels == label
        endpoints = scan.xyz[mask, :2]
        inside, flat = geometry.flat_index(geometry.grid.index_of(endpoints))
        detections = np.bincount(flat, minlength=size)
        intensity_sum = np.bincount(flat, weights=scan.intensity[mask][inside], minlength=size)
        transmissions = np.zeros(size, dtype=np.int64)
        for _, cells in iter_ray_cells(origin_xy, endpoints, geometry.grid, include_end=False,
                                       shape=(geometry.width, geometry.height)):
            if len(cells) == 0:
                continue
            ray_flat = cells[:, 1] * geometry.width + cells[:, 0]
            low = int(ray_flat.min())
            counted = np.bincount(ray_flat - low)
            transmissions[low:low + len(counted)] += counted
        with np.errstate(invalid="ignore", divide="ignore"):
            intensity = np.where(detections > 0, intensity_sum / np.maximum(detections, 1), 0.0)
        layers[f"detections_{family}"] = detections.astype(np.int64).reshape(geometry.shape)
        layers[f"transmissions_{family}"] = transmissions.reshape(geometry.shape)
        layers[f"intensity_{family}"] = np.clip(intensity, 0.0, 1.0).reshape(geometry.shape)
    return MultiLayerGridMap(geometry, layers)


# --- аугментация ----------------------------------------------------------------

def _grid_layers(grid: GridLike) -> Dict[str, np.ndarray]:
    return grid.layers


def _rebuild(grid: GridLike, geometry: MapGeometry, layers: Dict[str, np.ndarray]) -> GridLike:
    if isinstance(grid, BeliefGrid):
        return BeliefGrid(geometry, layers["bel_o"], layers["bel_f"])
    return MultiLayerGridMap(geometry, layers)


def augment_crop(grid: GridLike, rotation: float = 0.0, offset: Sequence[float] = (0.0, 0.0),
                 out_size: int = DEFAULT_CROP_CELLS) -> GridLike:
    """Кроп out_size × out_size, повёрнутый на rotation и сдвинутый на offset от центра источника.

    Ресемплинг ближайшим соседом; результат выражен в собственном кадре кропа,
    центр которого — центр источника плюс offset.
    """
    geo = grid.geometry
    edge = geo.edge
    half = out_size * edge / 2.0
    cols, rows = np.meshgrid(np.arange(out_size), np.arange(out_size))
    local_x = (cols + 0.5) * edge - half
    local_y = (rows + 0.5) * edge - half
    c, s = np.cos(rotation), np.sin(rotation)
    center = geo.center + np.asarray(offset, dtype=np.float64)
    world_x = center[0] + c * local_x - s * local_y
    world_y = center[1] + s * local_x + c * local_y
    src_x = np.floor((world_x - geo.origin[0]) / edge).astype(np.int64)
    src_y = np.floor((world_y - geo.origin[1]) / edge).astype(np.int64)
    if (src_x.min() < 0 or src_y.min() < 0 or src_x.max() >= geo.width or src_y.max() >= geo.height):
        raise ValueError("crop window exceeds the source grid extent")
    out_geo = MapGeometry(out_size, out_size, edge, (center[0] - half, center[1] - half))
    layers = {name: arr[src_y, src_x] for name, arr in _grid_layers(grid).items()}
    return _rebuild(grid, out_geo, layers)


def max_crop_offset(geometry: MapGeometry, out_size: int = DEFAULT_CROP_CELLS) -> float:
    """Наибольший сдвиг, при котором кроп при любом повороте остаётся внутри источника."""
    inner = min(geometry.width, geometry.height) * geometry.edge / 2.0
    reach = out_size * geometry.edge * np.sqrt(2.0) / 2.0
    # запас в полклетки на округление ближайшего соседа
    return inner - reach - geometry.edge


def random_augmentation(geometry: MapGeometry, rng: np.random.Generator,
                        out_size: int = DEFAULT_CROP_CELLS) -> Tuple[float, Tuple[float, float]]:
    radius = max_crop_offset(geometry, out_size)
    if radius < 0:
        raise ValueError(f"source grid too small for a rotated {out_size}-cell crop")
    rotation = float(rng.uniform(0.0, 2.0 * np.pi))
    r = radius * np.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * np.pi)
    return rotation, (float(r * np.cos(phi)), float(r * np.sin(phi)))
