"""Оценка плоскости земли с робастной функцией потерь Коши и разметка точек.

Плоскость n·p + d = 0, |n| = 1, нормаль ориентирована вверх (n_z > 0).
Минимизируется Σ ρ(r²), ρ(s) = c²·log(1 + s/c²), методом IRLS: каждая итерация —
взвешенная МНК-плоскость (собственный вектор взвешенной ковариации) с весами
ρ'(r²) = 1 / (1 + r²/c²). ρ вогнута по s, поэтому стоимость не возрастает.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from core import PointCloud, PoseSE3

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 0.05
DEFAULT_GROUND_BAND = 0.2
DEFAULT_MULTIPATH_CUTOFF = -0.2
INIT_LOWEST_FRACTION = 0.3
STEP_TOLERANCE = 1e-10
MAX_ITERATIONS = 500

LABEL_GROUND = 0
LABEL_NON_GROUND = 1
LABEL_DISCARDED = 2


@dataclass(frozen=True)
class PlaneParams:
    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValueError("plane normal must be non-zero")
        n, d = n / norm, float(self.d) / norm
        if _points_down(n):
            n, d = -n, -d
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", d)

    def signed_height(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.normal + self.d

    def transformed(self, pose: PoseSE3) -> "PlaneParams":
        n = pose.rot.apply(self.normal)
        return PlaneParams(n, self.d - float(n @ pose.translation))

    def to_json(self) -> dict:
        nx, ny, nz = self.normal.tolist()
        return {"nx": nx, "ny": ny, "nz": nz, "d": self.d}

    @classmethod
    def from_json(cls, data: dict) -> "PlaneParams":
        return cls(np.array([data["nx"], data["ny"], data["nz"]], dtype=np.float64), data["d"])


def _points_down(n: np.ndarray) -> bool:
    # вертикальные плоскости ориентируем по первой ненулевой компоненте
    for comp in (n[2], n[0], n[1]):
        if comp != 0:
            return comp < 0
    return False


@dataclass
class PlaneFit:
    plane: PlaneParams
    iterations: int
    costs: List[float] = field(default_factory=list)


def cauchy_cost(plane: PlaneParams, points: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    r = plane.signed_height(points)
    c2 = scale * scale
    return float(np.sum(c2 * np.log1p(r * r / c2)))


def _weighted_plane(points: np.ndarray, weights: np.ndarray) -> PlaneParams:
    w = weights / weights.sum()
    centroid = w @ points
    centered = points - centroid
    cov = (centered * w[:, None]).T @ centered
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    return PlaneParams(normal, -float(normal @ centroid))


def _check_spread(points: np.ndarray) -> None:
    if len(points) < 3:
        raise ValueError(f"plane fit needs at least 3 points, got {len(points)}")
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-9 * max(1.0, s[0]):
        raise ValueError("degenerate point set: points are collinear or coincident")


def _initial_plane(points: np.ndarray) -> PlaneParams:
    """МНК-плоскость по нижним 30 % точек по z (если подмножество вырождено — по всем)."""
    count = max(3, int(np.ceil(INIT_LOWEST_FRACTION * len(points))))
    lowest = points[np.argsort(points[:, 2], kind="stable")[:count]]
    try:
        _check_spread(lowest)
    except ValueError:
        lowest = points
    return _weighted_plane(lowest, np.ones(len(lowest)))


def fit_plane_report(points, scale: float = DEFAULT_SCALE,
                     max_iterations: int = MAX_ITERATIONS) -> PlaneFit:
    pts = np.asarray(points.xyz if isinstance(points, PointCloud) else
                     [tuple(p)[:3] for p in points] if isinstance(points, list) else points,
                     dtype=np.float64).reshape(-1, 3)
    _check_spread(pts)
    if scale <= 0:
        raise ValueError(f"Cauchy scale must be positive, got {scale}")

    plane = _initial_plane(pts)
    costs = [cauchy_cost(plane, pts, scale)]
    c2 = scale * scale
    for iteration in range(1, max_iterations + 1):
        r = plane.signed_height(pts)
        new_plane = _weighted_plane(pts, 1.0 / (1.0 + r * r / c2))
        step = np.linalg.norm(new_plane.normal - plane.normal) + abs(new_plane.d - plane.d)
        plane = new_plane
        costs.append(cauchy_cost(plane, pts, scale))
        if step < STEP_TOLERANCE:
            return PlaneFit(plane, iteration, costs)
    raise RuntimeError(f"plane fit did not converge in {max_iterations} iterations (last step {step:.3g})")


def fit_plane(points, scale: float = DEFAULT_SCALE) -> PlaneParams:
    return fit_plane_report(points, scale).plane


@dataclass(frozen=True)
class GroundSegmentation:
    ground: PointCloud
    non_ground: PointCloud
    discarded: PointCloud
    labels: np.ndarray

    def counts(self) -> dict:
        return {"ground": len(self.ground), "non_ground": len(self.non_ground),
                "discarded": len(self.discarded)}


def classify_heights(heights: np.ndarray, ground_band: float = DEFAULT_GROUND_BAND,
                     multipath_cutoff: float = DEFAULT_MULTIPATH_CUTOFF) -> np.ndarray:
    labels = np.full(len(heights), LABEL_GROUND, dtype=np.int8)
    labels[heights > ground_band] = LABEL_NON_GROUND
    labels[heights < multipath_cutoff] = LABEL_DISCARDED
    return labels


def segment_points(cloud: PointCloud, plane: PlaneParams, ground_band: float = DEFAULT_GROUND_BAND,
                   multipath_cutoff: float = DEFAULT_MULTIPATH_CUTOFF) -> GroundSegmentation:
    """cutoff ≤ h ≤ band — земля, h > band — не земля, h < cutoff — многолучевые отражения."""
    if multipath_cutoff > ground_band:
        raise ValueError("multipath cutoff must not exceed the ground band")
    labels = classify_heights(plane.signed_height(cloud.xyz), ground_band, multipath_cutoff)
    labels.setflags(write=False)
    discarded = int(np.count_nonzero(labels == LABEL_DISCARDED))
    if discarded:
        logger.info("Scan %s: %d points below the multipath cutoff discarded", cloud.scan_id, discarded)
    return GroundSegmentation(
        ground=cloud.subset(labels == LABEL_GROUND),
        non_ground=cloud.subset(labels == LABEL_NON_GROUND),
        discarded=cloud.subset(labels == LABEL_DISCARDED),
        labels=labels,
    )
