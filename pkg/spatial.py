"""Пространственные ядра: точный k-NN, ковариации точек для GICP, обход вокселей/ячеек лучом.

Дискретизация полуоткрытая: точка на грани принадлежит вокселю с большим индексом
([low, high) по каждой оси), поэтому разбиение точек и обход лучом согласованы.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 10
DEFAULT_EPSILON = 1e-3
CHUNK_RAYS = 4096

# относительный допуск, при котором расстояния k-го и (k+1)-го соседа считаются равными
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class GridGeometry:
    """Регулярная решётка: ребро ячейки и положение угла ячейки с индексом 0."""

    edge: float
    origin: Tuple[float, ...]

    def __post_init__(self):
        if not (self.edge > 0 and np.isfinite(self.edge)):
            raise ValueError(f"grid edge must be positive, got {self.edge}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def ndim(self) -> int:
        return len(self.origin)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / self.edge

    def index_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor(self.to_local(points)).astype(np.int64)

    def center_of(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(indices, dtype=np.float64) + 0.5) * self.edge


def _as_xyz(points) -> np.ndarray:
    if hasattr(points, "xyz"):
        return np.asarray(points.xyz, dtype=np.float64)
    arr = np.asarray([tuple(p)[:3] for p in points] if isinstance(points, list) else points,
                     dtype=np.float64)
    return arr.reshape(-1, 3)


class NeighborIndex:
    """Неизменяемый k-d индекс с точным k-NN и детерминированным разбором равных расстояний."""

    def __init__(self, points):
        pts = _as_xyz(points)
        if len(pts) == 0:
            raise ValueError("cannot build a neighbor index over an empty point set")
        pts = pts.copy()
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, query: Sequence[float], k: int) -> Tuple[np.ndarray, np.ndarray]:
        dist, idx = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return dist[0], idx[0]

    def knn_batch(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k ближайших для каждой строки queries, по возрастанию (расстояние, индекс точки)."""
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        k_eff = min(k, n)
        k_query = min(k_eff + 1, n)
        _, idx = self._tree.query(queries, k=k_query)
        idx = np.asarray(idx).reshape(len(queries), k_query)
        dist = np.linalg.norm(self.points[idx] - queries[:, None, :], axis=-1)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)

        if k_query > k_eff:
            kth, nxt = dist[:, k_eff - 1], dist[:, k_eff]
            for row in np.nonzero(nxt - kth <= _TIE_RTOL * (1.0 + kth))[0]:
                dist[row, :k_eff], idx[row, :k_eff] = self._resolve_ties(queries[row], kth[row], k_eff)
        return dist[:, :k_eff], idx[:, :k_eff]

    def _resolve_ties(self, query: np.ndarray, radius: float, k: int) -> Tuple[np.ndarray, np.ndarray]:
        candidates = np.asarray(
            self._tree.query_ball_point(query, radius * (1.0 + 1e-9) + 1e-12), dtype=np.int64)
        dist = np.linalg.norm(self.points[candidates] - query, axis=-1)
        order = np.lexsort((candidates, dist))[:k]
        return dist[order], candidates[order]

    def nearest_within(self, queries: np.ndarray, max_distance: float) -> Tuple[np.ndarray, np.ndarray]:
        """Ближайший сосед с порогом; для отсутствующих индекс -1, расстояние inf."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        dist, idx = self._tree.query(queries, k=1, distance_upper_bound=max_distance)
        idx = np.where(np.isfinite(dist), idx, -1)
        return dist, idx


def build_index(points) -> NeighborIndex:
    return NeighborIndex(points)


def estimate_covariances(cloud, k: int = DEFAULT_NEIGHBORS, epsilon: float = DEFAULT_EPSILON,
                         index: NeighborIndex = None) -> np.ndarray:
    """Ковариации (N, 3, 3) по k ближайшим соседям со спектром, приведённым к (ε, 1, 1).

    Собственные векторы выборочной ковариации сохраняются, собственные значения
    заменяются на (ε, 1, 1) по возрастанию (модель плоскость-плоскость GICP).
    """
    pts = _as_xyz(cloud)
    if len(pts) < k:
        raise ValueError(f"covariance estimation needs at least {k} points, got {len(pts)}")
    index = index or NeighborIndex(pts)
    _, idx = index.knn_batch(pts, k)
    neighbors = pts[idx]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    sample = np.einsum("nki,nkj->nij", centered, centered) / max(k - 1, 1)
    _, vecs = np.linalg.eigh(sample)
    spectrum = np.array([epsilon, 1.0, 1.0])
    cov = np.einsum("nij,j,nkj->nik", vecs, spectrum, vecs)
    return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


# --- обход лучом -------------------------------------------------------------

def _check_ray(u0: np.ndarray, u1: np.ndarray) -> None:
    if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(u1))):
        raise ValueError("ray endpoints must be finite")
    if np.array_equal(u0, u1):
        raise ValueError("zero-length ray")


def traverse_cells(origin: Sequence[float], endpoint: Sequence[float], grid: GridGeometry) -> List[tuple]:
    """Точный обход (в духе Amanatides–Woo) от ячейки начала до ячейки конца включительно.

    Соседние элементы результата смежны по грани; при равенстве времён пересечения
    первой шагает ось с меньшим номером.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(grid.ndim)
    endpoint = np.asarray(endpoint, dtype=np.float64).reshape(grid.ndim)
    u0, u1 = grid.to_local(origin), grid.to_local(endpoint)
    _check_ray(u0, u1)

    cell = np.floor(u0).astype(np.int64)
    end = np.floor(u1).astype(np.int64)
    step = np.sign(end - cell)
    remaining = np.abs(end - cell)
    direction = u1 - u0
    out = [tuple(int(c) for c in cell)]
    while remaining.any():
        best, best_t = -1, np.inf
        for axis in range(grid.ndim):
            if remaining[axis] == 0:
                continue
            boundary = cell[axis] + 1 if step[axis] > 0 else cell[axis]
            t = (boundary - u0[axis]) / direction[axis]
            if t < best_t:
                best, best_t = axis, t
        cell[best] += step[best]
        remaining[best] -= 1
        out.append(tuple(int(c) for c in cell))
    return out


def traverse_voxels_3d(origin, endpoint, grid: GridGeometry) -> List[Tuple[int, int, int]]:
    if grid.ndim != 3:
        raise ValueError("traverse_voxels_3d needs a 3D grid")
    return traverse_cells(origin, endpoint, grid)


def traverse_cells_2d(origin_xy, endpoint_xy, grid: GridGeometry) -> List[Tuple[int, int]]:
    if grid.ndim != 2:
        raise ValueError("traverse_cells_2d needs a 2D grid")
    return traverse_cells(origin_xy, endpoint_xy, grid)


def _crossing_time(u0: np.ndarray, direction: np.ndarray, c0: np.ndarray,
                   sign: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Момент k-го пересечения грани по оси, та же формула, что в traverse_cells."""
    boundary = np.where(sign > 0, c0 + k, c0 - k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (boundary - u0) / direction


def _steps_before(u0, direction, c0, steps, sign, rid, t, axis: int, other: int) -> np.ndarray:
    """Сколько шагов по оси other сделано до пересечения по оси axis в момент t.

    При равных временах первой шагает ось с меньшим номером.
    """
    u, d, c = u0[rid, other], direction[rid, other], c0[rid, other]
    s, sg = steps[rid, other], sign[rid, other]
    pos = u + t * d
    est = np.where(sg > 0, np.floor(pos) - c, np.floor(c + 1 - pos))
    count = np.clip(est, 0, s).astype(np.int64)

    def happened(k):
        tk = _crossing_time(u, d, c, sg, k)
        return tk <= t if other < axis else tk < t

    # оценка по положению луча ошибается не больше чем на шаг
    for _ in range(2):
        count += (count < s) & happened(count + 1)
        count -= (count > 0) & ~happened(count)
    return count


def _crossing_cells(u0: np.ndarray, u1: np.ndarray, include_end: bool,
                    shape: Optional[Tuple[int, ...]] = None
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Векторный вариант traverse_cells для пачки лучей: (ray_ids, позиция в обходе, ячейки).

    Каждое пересечение грани по оси a даёт новую ячейку: по оси a индекс известен точно,
    по остальным осям он равен числу шагов, сделанных до этого пересечения.
    С shape перебираются только пересечения, ведущие в ячейки [0, shape).
    """
    n_rays, ndim = u0.shape
    c0 = np.floor(u0).astype(np.int64)
    c1 = np.floor(u1).astype(np.int64)
    delta = c1 - c0
    steps = np.abs(delta)
    sign = np.sign(delta)
    direction = u1 - u0
    total_steps = steps.sum(axis=1)

    rays = np.arange(n_rays)
    ray_parts, pos_parts, cell_parts = [rays], [np.zeros(n_rays, dtype=np.int64)], [c0]
    for axis in range(ndim):
        first = np.ones(n_rays, dtype=np.int64)
        last = steps[:, axis]
        if shape is not None:
            c, w = c0[:, axis], shape[axis]
            first = np.maximum(first, np.where(sign[:, axis] > 0, -c, c - w + 1))
            last = np.minimum(last, np.where(sign[:, axis] > 0, w - 1 - c, c))
        counts = np.clip(last - first + 1, 0, None)
        total = int(counts.sum())
        if total == 0:
            continue
        rid = np.repeat(rays, counts)
        k = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + np.repeat(first, counts)
        sg = sign[rid, axis]
        t = _crossing_time(u0[rid, axis], direction[rid, axis], c0[rid, axis], sg, k)
        cells = np.empty((total, ndim), dtype=np.int64)
        cells[:, axis] = c0[rid, axis] + sg * k
        pos = k.copy()
        for other in range(ndim):
            if other == axis:
                continue
            done = _steps_before(u0, direction, c0, steps, sign, rid, t, axis, other)
            cells[:, other] = c0[rid, other] + sign[rid, other] * done
            pos += done
        ray_parts.append(rid)
        pos_parts.append(pos)
        cell_parts.append(cells)

    rid, pos, cells = np.concatenate(ray_parts), np.concatenate(pos_parts), np.concatenate(cell_parts)
    keep = np.ones(len(rid), dtype=bool) if include_end else pos < total_steps[rid]
    if shape is not None:
        keep &= np.all((cells >= 0) & (cells < np.asarray(shape)), axis=1)
    return rid[keep], pos[keep], cells[keep]


def iter_ray_cells(origins: np.ndarray, endpoints: np.ndarray, grid: GridGeometry,
                   include_end: bool = False, chunk_rays: int = CHUNK_RAYS, *,
                   shape: Optional[Tuple[int, ...]] = None, ordered: bool = False
                   ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Ячейки, пройденные пачкой лучей, порциями (ray_ids, cells).

    include_end=False: только ячейки строго до конечной (трансмиссии);
    лучи нулевой длины в этом режиме ничего не дают. shape ограничивает обход
    ячейками [0, shape) по каждой оси. ordered=True упорядочивает порцию по лучу
    и по ходу луча, как в traverse_cells.
    """
    origins = np.asarray(origins, dtype=np.float64)
    endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, grid.ndim)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, endpoints.shape)
    u0_all, u1_all = grid.to_local(origins), grid.to_local(endpoints)
    for start in range(0, len(endpoints), chunk_rays):
        stop = start + chunk_rays
        rid, pos, cells = _crossing_cells(u0_all[start:stop], u1_all[start:stop], include_end, shape)
        if ordered:
            order = np.lexsort((pos, rid))
            rid, cells = rid[order], cells[order]
        yield rid + start, cells
