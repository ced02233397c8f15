"""Базовые геометрические типы: точки, облака, позы SE(3), последовательности сканов.

Система координат правая, ось z направлена вверх («высота над землёй»).
Поза PoseSE3 отображает точки кадра скана в опорный кадр: p_ref = R·p + t.
Кватернион хранится в порядке (qx, qy, qz, qw), как в TUM-файлах поз.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_TOLERANCE = 1e-9


class Point3(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    """Нормировка и выбор знака: qw >= 0 (при qw == 0 — первая ненулевая компонента > 0)."""
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError(f"invalid quaternion: {q.tolist()}")
    q = q / norm
    for comp in (q[3], q[0], q[1], q[2]):
        if comp > 0:
            break
        if comp < 0:
            q = -q
            break
    return q


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation: {t.tolist()}")
        object.__setattr__(self, "rotation", _frozen(_canonical_quat(q)))
        object.__setattr__(self, "translation", _frozen(t.copy()))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(rotation.as_quat(), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "PoseSE3":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(Rotation.from_matrix(matrix[:3, :3]).as_quat(), matrix[:3, 3])

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float = 0.0, yaw: float = 0.0) -> "PoseSE3":
        return cls(Rotation.from_euler("z", yaw).as_quat(), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def translate(cls, x: float, y: float, z: float) -> "PoseSE3":
        return cls(translation=np.array([x, y, z], dtype=np.float64))

    @property
    def rot(self) -> Rotation:
        return Rotation.from_quat(self.rotation)

    def rotation_matrix(self) -> np.ndarray:
        return self.rot.as_matrix()

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "PoseSE3":
        inv_rot = self.rot.inv()
        return PoseSE3(inv_rot.as_quat(), -inv_rot.apply(self.translation))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: сначала other, затем self."""
        return PoseSE3(
            (self.rot * other.rot).as_quat(),
            self.rot.apply(other.translation) + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            return points.reshape(-1, 3).copy()
        return points @ self.rotation_matrix().T + self.translation

    def yaw(self) -> float:
        return float(self.rot.as_euler("zyx")[0])

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_tum(self) -> List[float]:
        """tx ty tz qx qy qz qw"""
        return [*self.translation.tolist(), *self.rotation.tolist()]

    @classmethod
    def from_tum(cls, values: Sequence[float]) -> "PoseSE3":
        if len(values) != 7:
            raise ValueError(f"TUM pose needs 7 values, got {len(values)}")
        return cls(np.asarray(values[3:], dtype=np.float64), np.asarray(values[:3], dtype=np.float64))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def inverse(pose: PoseSE3) -> PoseSE3:
    return pose.inverse()


def rotation_error_deg(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.degrees((a.rot.inv() * b.rot).magnitude()))


def translation_error(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True)
class PointCloud:
    """Облако точек одного скана: xyz (N, 3), intensity (N,), начало координат сенсора."""

    xyz: np.ndarray
    intensity: np.ndarray
    timestamp: float = 0.0
    scan_id: str = ""
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if len(intensity) != len(xyz):
            raise ValueError(f"intensity count {len(intensity)} != point count {len(xyz)}")
        if not np.all(np.isfinite(xyz)) or not np.all(np.isfinite(origin)):
            raise ValueError(f"scan {self.scan_id!r}: non-finite coordinates")
        if len(intensity) and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError(f"scan {self.scan_id!r}: intensity outside [0, 1]")
        if not np.isfinite(self.timestamp):
            raise ValueError(f"scan {self.scan_id!r}: non-finite timestamp")
        object.__setattr__(self, "xyz", _frozen(xyz.copy()))
        object.__setattr__(self, "intensity", _frozen(intensity.copy()))
        object.__setattr__(self, "sensor_origin", _frozen(origin.copy()))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "scan_id", str(self.scan_id))

    @classmethod
    def from_points(cls, points: Iterable[Point3], timestamp: float = 0.0, scan_id: str = "",
                    sensor_origin: Optional[Point3] = None) -> "PointCloud":
        rows = [tuple(p) for p in points]
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
        origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin[:3], dtype=np.float64)
        return cls(arr[:, :3], arr[:, 3], timestamp, scan_id, origin)

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def points(self) -> List[Point3]:
        return [Point3(*row, float(i)) for row, i in zip(self.xyz.tolist(), self.intensity.tolist())]

    def require_points(self, minimum: int = 1) -> None:
        if len(self) < minimum:
            raise ValueError(f"scan {self.scan_id!r} has {len(self)} points, need at least {minimum}")

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.intensity[mask], self.timestamp, self.scan_id,
                          self.sensor_origin)


def transform_cloud(cloud: PointCloud, pose: PoseSE3) -> PointCloud:
    return PointCloud(
        pose.apply(cloud.xyz),
        cloud.intensity,
        cloud.timestamp,
        cloud.scan_id,
        pose.apply(cloud.sensor_origin[None, :])[0],
    )


@dataclass(frozen=True)
class ScanSequence:
    scans: tuple
    poses: Optional[tuple] = None

    def __post_init__(self):
        scans = tuple(self.scans)
        stamps = [s.timestamp for s in scans]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("scan timestamps must be strictly increasing")
        ids = [s.scan_id for s in scans]
        if len(set(ids)) != len(ids):
            raise ValueError("scan ids must be unique within a sequence")
        object.__setattr__(self, "scans", scans)
        if self.poses is not None:
            poses = tuple(self.poses)
            if len(poses) != len(scans):
                raise ValueError(f"{len(poses)} poses for {len(scans)} scans")
            object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.scans)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.scans], dtype=np.float64)

    def index_of(self, scan_id: str) -> int:
        for i, scan in enumerate(self.scans):
            if scan.scan_id == scan_id:
                return i
        raise ValueError(f"scan {scan_id!r} is not in the sequence")

    def with_poses(self, poses: Sequence[PoseSE3]) -> "ScanSequence":
        return ScanSequence(self.scans, tuple(poses))

    def require_poses(self) -> tuple:
        if self.poses is None:
            raise ValueError("sequence has no poses; run registration first")
        return self.poses

    def registered_points(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        poses = self.require_poses()
        indices = range(len(self.scans)) if indices is None else indices
        chunks = [poses[i].apply(self.scans[i].xyz) for i in indices]
        return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def relative_to_first(poses: Sequence[PoseSE3]) -> List[PoseSE3]:
    if not poses:
        return []
    first_inv = poses[0].inverse()
    return [first_inv.compose(p) for p in poses]
