"""Синтетические сцены и имитация дальномера для тестов с известной разметкой.

Примитивы: плоскость земли, параллелепипеды (оси совпадают с осями мира) и
вертикальные цилиндры, возможно движущиеся с постоянной скоростью
(центр задан на момент t = 0). Шум дальности — вдоль луча.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation, Slerp

from core import PointCloud, PoseSE3, ScanSequence, relative_to_first
from mapping import MapGeometry

logger = logging.getLogger(__name__)

LABEL_GROUND = 0
LABEL_NONE = -1
MIN_HIT_DISTANCE = 1e-6
TIME_TOLERANCE = 1e-9

Vec3 = Tuple[float, float, float]
Vec2 = Tuple[float, float]


class _Spec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class GroundSpec(_Spec):
    normal: Vec3 = (0.0, 0.0, 1.0)
    d: float = 0.0
    reflectivity: float = Field(0.3, ge=0.0, le=1.0)


class BoxSpec(_Spec):
    center: Vec3
    size: Vec3
    reflectivity: float = Field(0.6, ge=0.0, le=1.0)
    velocity: Vec3 = (0.0, 0.0, 0.0)

    @field_validator("size")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("box size must be positive")
        return v

    @property
    def moving(self) -> bool:
        return any(self.velocity)

    def bounds(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center) + np.asarray(self.velocity) * t
        half = np.asarray(self.size) / 2.0
        return c - half, c + half


class CylinderSpec(_Spec):
    center: Vec2
    radius: float = Field(gt=0.0)
    z_min: float = 0.0
    z_max: float = 2.0
    reflectivity: float = Field(0.5, ge=0.0, le=1.0)
    velocity: Vec2 = (0.0, 0.0)

    @model_validator(mode="after")
    def _heights(self):
        if self.z_max <= self.z_min:
            raise ValueError("cylinder z_max must exceed z_min")
        return self

    @property
    def moving(self) -> bool:
        return any(self.velocity)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.velocity) * t


class TrajectoryPoint(_Spec):
    t: float
    position: Vec3
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def rotation(self) -> Rotation:
        return Rotation.from_euler("zyx", [self.yaw, self.pitch, self.roll])


class SensorSpec(_Spec):
    horizontal_rays: int = Field(360, gt=0)
    vertical_channels: int = Field(16, gt=0)
    horizontal_fov: float = Field(360.0, gt=0.0, le=360.0)
    vertical_fov: Vec2 = (-15.0, 15.0)
    max_range: float = Field(50.0, gt=0.0)
    range_noise: float = Field(0.0, ge=0.0)
    seed: int = 0

    def directions(self) -> np.ndarray:
        """Единичные направления лучей в кадре сенсора, порядок: канал, затем азимут."""
        step = self.horizontal_fov / self.horizontal_rays
        az = np.radians(-self.horizontal_fov / 2.0 + (np.arange(self.horizontal_rays) + 0.5) * step)
        lo, hi = self.vertical_fov
        el = np.radians(np.linspace(lo, hi, self.vertical_channels) if self.vertical_channels > 1
                        else np.array([(lo + hi) / 2.0]))
        el_grid, az_grid = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(el_grid) * np.cos(az_grid),
                         np.cos(el_grid) * np.sin(az_grid),
                         np.sin(el_grid)], axis=-1).reshape(-1, 3)


class SceneSpec(_Spec):
    ground: Optional[GroundSpec] = GroundSpec()
    boxes: List[BoxSpec] = []
    cylinders: List[CylinderSpec] = []
    trajectory: List[TrajectoryPoint]
    sensor: SensorSpec = SensorSpec()
    rate: float = Field(10.0, gt=0.0)
    duration: Optional[float] = None

    @field_validator("trajectory")
    @classmethod
    def _ordered(cls, v):
        if not v:
            raise ValueError("trajectory needs at least one point")
        stamps = [p.t for p in v]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")
        return v

    @property
    def start(self) -> float:
        return self.trajectory[0].t

    @property
    def span(self) -> float:
        return self.trajectory[-1].t - self.trajectory[0].t

    def pose_at(self, t: float) -> PoseSE3:
        points = self.trajectory
        if len(points) == 1:
            return PoseSE3.from_rotation(points[0].rotation(), points[0].position)
        times = np.array([p.t for p in points])
        if t < times[0] - TIME_TOLERANCE or t > times[-1] + TIME_TOLERANCE:
            raise ValueError(f"t={t} outside the trajectory span [{times[0]}, {times[-1]}]")
        t = float(np.clip(t, times[0], times[-1]))
        rotations = Rotation.concatenate([p.rotation() for p in points])
        position = np.array([p.position for p in points])
        translation = [np.interp(t, times, position[:, axis]) for axis in range(3)]
        return PoseSE3.from_rotation(Slerp(times, rotations)([t])[0], translation)

    def label_names(self) -> Dict[int, str]:
        names = {LABEL_GROUND: "ground"}
        for i, _ in enumerate(self.boxes):
            names[1 + i] = f"box_{i}"
        for i, _ in enumerate(self.cylinders):
            names[1 + len(self.boxes) + i] = f"cylinder_{i}"
        return names

    def moving_labels(self) -> List[int]:
        labels = [1 + i for i, b in enumerate(self.boxes) if b.moving]
        labels += [1 + len(self.boxes) + i for i, c in enumerate(self.cylinders) if c.moving]
        return labels

    def static_object_labels(self) -> List[int]:
        moving = set(self.moving_labels())
        return [label for label in self.label_names() if label != LABEL_GROUND and label not in moving]


# --- пересечения лучей -------------------------------------------------------

def _hit_plane(origin: np.ndarray, dirs: np.ndarray, ground: GroundSpec) -> np.ndarray:
    n = np.asarray(ground.normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    n, d = n / norm, ground.d / norm
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -(origin @ n + d) / denom
    return np.where(np.isfinite(t) & (t > MIN_HIT_DISTANCE), t, np.inf)


def _hit_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    t_min, t_max = np.minimum(t1, t2), np.maximum(t1, t2)
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    t_min = np.where(parallel, np.where(inside, -np.inf, np.inf), t_min)
    t_max = np.where(parallel, np.where(inside, np.inf, -np.inf), t_max)
    near, far = t_min.max(axis=1), t_max.min(axis=1)
    return np.where((near <= far) & (near > MIN_HIT_DISTANCE), near, np.inf)


def _hit_cylinder(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                  radius: float, z_min: float, z_max: float) -> np.ndarray:
    oxy = origin[:2] - center
    dxy = dirs[:, :2]
    a = np.einsum("ij,ij->i", dxy, dxy)
    b = 2.0 * dxy @ oxy
    c = oxy @ oxy - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (-b - np.sqrt(disc)) / (2.0 * a)
    z = origin[2] + s * dirs[:, 2]
    best = np.where((a > 0) & (disc >= 0) & (s > MIN_HIT_DISTANCE) & (z >= z_min) & (z <= z_max),
                    s, np.inf)
    for z_cap in (z_min, z_max):
        with np.errstate(divide="ignore", invalid="ignore"):
            s_cap = (z_cap - origin[2]) / dirs[:, 2]
        p = oxy + s_cap[:, None] * dxy
        ok = (dirs[:, 2] != 0) & (s_cap > MIN_HIT_DISTANCE) & (np.einsum("ij,ij->i", p, p) <= radius ** 2)
        best = np.minimum(best, np.where(ok, s_cap, np.inf))
    return best


@dataclass(frozen=True)
class SimulatedScan:
    cloud: PointCloud
    labels: np.ndarray
    pose: PoseSE3


def _noise_rng(seed: int, t: float) -> np.random.Generator:
    return np.random.default_rng([seed, int(round(t * 1e6)) % (1 << 63)])


def cast_rays(scene: SceneSpec, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(дальность до ближайшего попадания или inf, метка, отражательная способность) на луч."""
    pose = scene.pose_at(t)
    origin = pose.translation
    dirs = pose.rot.apply(scene.sensor.directions())
    n = len(dirs)
    best = np.full(n, np.inf)
    labels = np.full(n, LABEL_NONE, dtype=np.int32)
    reflect = np.zeros(n)

    def _take(candidate: np.ndarray, label: int, reflectivity: float) -> None:
        closer = candidate < best
        best[closer] = candidate[closer]
        labels[closer] = label
        reflect[closer] = reflectivity

    if scene.ground is not None:
        _take(_hit_plane(origin, dirs, scene.ground), LABEL_GROUND, scene.ground.reflectivity)
    for i, box in enumerate(scene.boxes):
        lo, hi = box.bounds(t)
        _take(_hit_box(origin, dirs, lo, hi), 1 + i, box.reflectivity)
    for i, cyl in enumerate(scene.cylinders):
        _take(_hit_cylinder(origin, dirs, cyl.center_at(t), cyl.radius, cyl.z_min, cyl.z_max),
              1 + len(scene.boxes) + i, cyl.reflectivity)
    best[best > scene.sensor.max_range] = np.inf
    labels[~np.isfinite(best)] = LABEL_NONE
    return best, labels, reflect


def simulate_scan(scene: SceneSpec, t: float, scan_id: Optional[str] = None) -> SimulatedScan:
    """Скан в кадре сенсора в момент t; метки точек — вне облака."""
    pose = scene.pose_at(t)
    ranges, labels, reflect = cast_rays(scene, t)
    noise = _noise_rng(scene.sensor.seed, t).standard_normal(len(ranges)) * scene.sensor.range_noise
    noisy = ranges + noise
    hit = np.isfinite(ranges) & (noisy > MIN_HIT_DISTANCE)
    xyz = scene.sensor.directions()[hit] * noisy[hit, None]
    cloud = PointCloud(xyz, reflect[hit], t, scan_id if scan_id is not None else f"{t:.6f}")
    return SimulatedScan(cloud, labels[hit], pose)


@dataclass
class SimulatedSequence:
    sequence: ScanSequence
    ground_truth: List[PoseSE3]
    labels: List[np.ndarray]

    def relative_ground_truth(self) -> List[PoseSE3]:
        return relative_to_first(self.ground_truth)

    def with_ground_truth(self) -> ScanSequence:
        return self.sequence.with_poses(self.relative_ground_truth())


def scan_times(scene: SceneSpec, rate: Optional[float] = None,
               duration: Optional[float] = None) -> np.ndarray:
    rate = rate or scene.rate
    duration = scene.duration if duration is None else duration
    if duration is None:
        duration = scene.span
    count = int(np.floor(duration * rate + 1e-9)) + 1
    return scene.start + np.arange(count) / rate


def simulate_sequence(scene: SceneSpec, rate: Optional[float] = None, duration: Optional[float] = None,
                      executor: Optional[Executor] = None) -> SimulatedSequence:
    """Сканы с шагом 1/rate от начала траектории, включая момент start + duration."""
    times = scan_times(scene, rate, duration)
    mapper = executor.map if executor is not None else map
    scans = list(mapper(lambda k: simulate_scan(scene, float(times[k]), f"scan_{k:04d}"), range(len(times))))
    logger.info("Simulated %d scans (%d points total)", len(scans), sum(len(s.cloud) for s in scans))
    return SimulatedSequence(
        ScanSequence(tuple(s.cloud for s in scans)),
        [s.pose for s in scans],
        [s.labels for s in scans],
    )


def swept_cells(scene: SceneSpec, t0: float, t1: float, geometry: MapGeometry,
                frame: Optional[PoseSE3] = None) -> np.ndarray:
    """Ячейки (ix, iy), центр которых накрывает движущийся примитив где-то на [t0, t1].

    frame: поза кадра сетки в мире (по умолчанию мир).
    """
    frame = frame or PoseSE3.identity()
    cols, rows = np.meshgrid(np.arange(geometry.width), np.arange(geometry.height))
    cells = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)
    centers = geometry.grid.center_of(cells)
    world = frame.apply(np.column_stack([centers, np.zeros(len(centers))]))[:, :2]
    covered = np.zeros(len(cells), dtype=bool)

    for box in scene.boxes:
        if not box.moving:
            continue
        lo_t, hi_t = np.full(len(world), t0), np.full(len(world), t1)
        half = np.asarray(box.size[:2]) / 2.0
        for axis in range(2):
            c0, v = box.center[axis], box.velocity[axis]
            x = world[:, axis]
            if v == 0:
                outside = np.abs(x - c0) > half[axis]
                lo_t[outside], hi_t[outside] = np.inf, -np.inf
                continue
            a, b = (x - c0 - half[axis]) / v, (x - c0 + half[axis]) / v
            lo_t = np.maximum(lo_t, np.minimum(a, b))
            hi_t = np.minimum(hi_t, np.maximum(a, b))
        covered |= lo_t <= hi_t

    for cyl in scene.cylinders:
        if not cyl.moving:
            continue
        start, end = cyl.center_at(t0), cyl.center_at(t1)
        seg = end - start
        s = np.clip((world - start) @ seg / (seg @ seg), 0.0, 1.0)
        nearest = start + s[:, None] * seg
        covered |= np.linalg.norm(world - nearest, axis=1) <= cyl.radius

    return cells[covered]


def labeled_cells(points: np.ndarray, labels: np.ndarray, wanted: Sequence[int],
                  geometry: MapGeometry) -> np.ndarray:
    """Уникальные ячейки сетки, содержащие точки с метками из wanted."""
    mask = np.isin(labels, list(wanted))
    cells = geometry.grid.index_of(np.asarray(points)[mask, :2])
    inside, _ = geometry.flat_index(cells)
    return np.unique(cells[inside], axis=0)


# --- демо-сцены -------------------------------------------------------------------

def _static_trajectory(position: Vec3, span: float) -> List[TrajectoryPoint]:
    return [TrajectoryPoint(t=0.0, position=position), TrajectoryPoint(t=span, position=position)]


def static_scene() -> SceneSpec:
    """Неподвижный сенсор; бокс выше сенсора, низкий бокс и столб."""
    return SceneSpec(
        boxes=[BoxSpec(center=(8.0, 0.0, 1.5), size=(2.0, 2.0, 3.0)),
               BoxSpec(center=(0.0, -7.0, 0.8), size=(1.0, 1.0, 1.6))],
        cylinders=[CylinderSpec(center=(-5.0, 5.0), radius=0.4, z_max=4.0)],
        trajectory=_static_trajectory((0.0, 0.0, 2.0), 4.0),
        sensor=SensorSpec(horizontal_rays=360, vertical_channels=16, vertical_fov=(-25.0, 5.0)),
        rate=10.0,
    )


def occlusion_scene() -> SceneSpec:
    """Сенсор едет вдоль x мимо высоких боксов, закрывающих области за собой."""
    return SceneSpec(
        boxes=[BoxSpec(center=(6.0, 4.0, 1.75), size=(2.0, 1.0, 3.5)),
               BoxSpec(center=(10.0, -4.0, 1.75), size=(2.0, 1.0, 3.5)),
               BoxSpec(center=(3.0, -8.0, 0.8), size=(1.0, 1.0, 1.6)),
               BoxSpec(center=(12.0, 8.0, 0.8), size=(1.0, 1.0, 1.6))],
        cylinders=[CylinderSpec(center=(8.0, 0.0), radius=0.3, z_max=4.0),
                   CylinderSpec(center=(14.0, -6.0), radius=0.3, z_max=4.0)],
        trajectory=[TrajectoryPoint(t=0.0, position=(0.0, 0.0, 2.0)),
                    TrajectoryPoint(t=4.0, position=(8.0, 0.0, 2.0))],
        sensor=SensorSpec(horizontal_rays=360, vertical_channels=16, vertical_fov=(-25.0, 5.0)),
        rate=10.0,
    )


def moving_box_scene() -> SceneSpec:
    """Бокс проходит поперёк поля зрения перед стеной; рядом такой же неподвижный бокс."""
    return SceneSpec(
        boxes=[BoxSpec(center=(15.25, 0.0, 1.5), size=(0.5, 30.0, 3.0), reflectivity=0.4),
               BoxSpec(center=(6.0, -3.0, 0.8), size=(1.0, 1.0, 1.6), velocity=(0.0, 1.5, 0.0)),
               BoxSpec(center=(6.0, 6.5, 0.8), size=(1.0, 1.0, 1.6))],
        trajectory=_static_trajectory((0.0, 0.0, 2.0), 4.0),
        sensor=SensorSpec(horizontal_rays=360, vertical_channels=16, vertical_fov=(-25.0, 5.0)),
        rate=10.0,
    )


def corridor_scene() -> SceneSpec:
    """Коридор без земли для регистрации: стены, боксы и столбы вдоль пути."""
    return SceneSpec(
        ground=None,
        boxes=[BoxSpec(center=(10.0, 4.1, 1.5), size=(60.0, 0.2, 3.0)),
               BoxSpec(center=(10.0, -4.1, 1.5), size=(60.0, 0.2, 3.0)),
               BoxSpec(center=(3.0, 3.0, 0.75), size=(1.0, 1.0, 1.5)),
               BoxSpec(center=(7.5, -3.2, 0.6), size=(1.2, 0.8, 1.2)),
               BoxSpec(center=(12.0, 2.8, 1.0), size=(0.8, 1.4, 2.0)),
               BoxSpec(center=(17.0, -2.9, 0.9), size=(1.5, 1.0, 1.8))],
        cylinders=[CylinderSpec(center=(5.0, -2.5), radius=0.3, z_max=3.0),
                   CylinderSpec(center=(9.0, 2.5), radius=0.25, z_max=3.0),
                   CylinderSpec(center=(14.5, -2.0), radius=0.35, z_max=3.0)],
        trajectory=[TrajectoryPoint(t=0.0, position=(0.0, 0.0, 1.0)),
                    TrajectoryPoint(t=12.0, position=(12.0, 0.0, 1.0))],
        sensor=SensorSpec(horizontal_rays=360, vertical_channels=31, vertical_fov=(-15.0, 15.0),
                          range_noise=0.01),
        rate=1.0,
    )


DEMO_SCENES = {
    "static": static_scene,
    "occlusion": occlusion_scene,
    "moving_box": moving_box_scene,
    "corridor": corridor_scene,
}


def demo_scene(name: str) -> SceneSpec:
    try:
        return DEMO_SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown demo scene {name!r}; choose from {sorted(DEMO_SCENES)}") from None
