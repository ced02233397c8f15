"""Регистрация сканов в две стадии.

1. Пакетный GICP: окна по шесть сканов, поза первого скана окна зафиксирована,
   соответствия — соседние пары плюс пара (первый, последний). Левенберг–Марквардт
   по всем позам окна сразу.
2. Граф поз: разности поз соседних сканов (и замыкающие рёбра окон) как наблюдения,
   Гаусс–Ньютон на SE(3) с разреженными нормальными уравнениями.

Приращения левые: T ← (R(ω)·R, R(ω)·t + v), δ = (ω, v).
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, identity as sparse_identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from core import PointCloud, PoseSE3, ScanSequence
from spatial import DEFAULT_EPSILON, DEFAULT_NEIGHBORS, NeighborIndex, estimate_covariances

logger = logging.getLogger(__name__)

BATCH_SIZE = 6
MAX_CORRESPONDENCE_DISTANCE = 1.0
MAX_OUTER_ITERATIONS = 50
MAX_LM_STEPS = 10
REL_COST_TOLERANCE = 1e-8
STEP_TOLERANCE = 1e-10
LM_LAMBDA_INIT = 1e-4
LM_LAMBDA_FACTOR = 10.0
LM_LAMBDA_MAX = 1e10

GRAPH_GRADIENT_TOLERANCE = 1e-8
GRAPH_MAX_ITERATIONS = 100


def skew(v: np.ndarray) -> np.ndarray:
    """[v]×, векторизовано по ведущим осям."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def retract(pose: PoseSE3, delta: np.ndarray) -> PoseSE3:
    delta = np.asarray(delta, dtype=np.float64)
    d_rot = Rotation.from_rotvec(delta[:3])
    return PoseSE3.from_rotation(d_rot * pose.rot, d_rot.apply(pose.translation) + delta[3:])


# --- GICP -------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedScan:
    """Скан с k-d индексом и ковариациями точек в собственном кадре."""

    cloud: PointCloud
    covariances: np.ndarray
    index: NeighborIndex

    @classmethod
    def prepare(cls, cloud: PointCloud, k: int = DEFAULT_NEIGHBORS,
                epsilon: float = DEFAULT_EPSILON) -> "PreparedScan":
        cloud.require_points(k)
        index = NeighborIndex(cloud.xyz)
        return cls(cloud, estimate_covariances(cloud, k, epsilon, index), index)

    @property
    def xyz(self) -> np.ndarray:
        return self.cloud.xyz


def _match(a: PreparedScan, b: PreparedScan, relative: PoseSE3,
           max_distance: float) -> Tuple[np.ndarray, np.ndarray]:
    _, idx = b.index.nearest_within(relative.apply(a.xyz), max_distance)
    found = idx >= 0
    return np.nonzero(found)[0], idx[found]


@dataclass(frozen=True)
class PairResiduals:
    a_idx: np.ndarray
    b_idx: np.ndarray
    residuals: np.ndarray
    combined: np.ndarray
    mahalanobis: np.ndarray

    def __len__(self) -> int:
        return len(self.a_idx)

    @property
    def cost(self) -> float:
        return float(self.mahalanobis.sum())


def gicp_align_pair_residuals(a: PreparedScan, b: PreparedScan, transform: PoseSE3,
                              max_distance: float = MAX_CORRESPONDENCE_DISTANCE) -> PairResiduals:
    """Остатки GICP для T, переводящего кадр a в кадр b.

    d = q − T·p, ковариация C_q + R·C_p·Rᵀ, член стоимости dᵀ·(C_q + R·C_p·Rᵀ)⁻¹·d.
    """
    a_idx, b_idx = _match(a, b, transform, max_distance)
    if len(a_idx) == 0:
        raise ValueError(f"no correspondences within {max_distance} m between "
                         f"{a.cloud.scan_id!r} and {b.cloud.scan_id!r}")
    rot = transform.rotation_matrix()
    d = b.xyz[b_idx] - transform.apply(a.xyz[a_idx])
    combined = b.covariances[b_idx] + rot @ a.covariances[a_idx] @ rot.T
    maha = np.einsum("ki,ki->k", d, np.linalg.solve(combined, d[..., None])[..., 0])
    return PairResiduals(a_idx, b_idx, d, combined, maha)


@dataclass(frozen=True)
class _Link:
    """Соответствия пары с зафиксированной отбеливающей матрицей (в опорном кадре)."""

    a: int
    b: int
    p: np.ndarray
    q: np.ndarray
    whiten: np.ndarray


@dataclass
class BatchResult:
    poses: List[PoseSE3]
    converged: bool
    iterations: int
    final_cost: float
    correspondence_count: int
    cost_history: List[float] = field(default_factory=list)
    step_costs: List[List[float]] = field(default_factory=list)


class GicpBatchProblem:
    """Окно сканов с начальными позами; поза скана 0 окна не меняется."""

    def __init__(self, scans: Sequence, initial_poses: Optional[Sequence[PoseSE3]] = None,
                 max_distance: float = MAX_CORRESPONDENCE_DISTANCE,
                 k: int = DEFAULT_NEIGHBORS, epsilon: float = DEFAULT_EPSILON):
        if len(scans) < 2:
            raise ValueError(f"batch registration needs at least 2 scans, got {len(scans)}")
        self.scans = [s if isinstance(s, PreparedScan) else PreparedScan.prepare(s, k, epsilon)
                      for s in scans]
        if initial_poses is None:
            initial_poses = [PoseSE3.identity()] * len(scans)
        if len(initial_poses) != len(scans):
            raise ValueError(f"{len(initial_poses)} initial poses for {len(scans)} scans")
        self.initial_poses = list(initial_poses)
        self.max_distance = max_distance

    def __len__(self) -> int:
        return len(self.scans)

    @cached_property
    def pairs(self) -> List[Tuple[int, int]]:
        n = len(self.scans)
        pairs = [(i, i + 1) for i in range(n - 1)]
        if n > 2:
            pairs.append((0, n - 1))
        return pairs

    def links(self, poses: Sequence[PoseSE3]) -> List[_Link]:
        out = []
        for a, b in self.pairs:
            sa, sb = self.scans[a], self.scans[b]
            relative = poses[b].inverse().compose(poses[a])
            a_idx, b_idx = _match(sa, sb, relative, self.max_distance)
            if len(a_idx) == 0:
                continue
            ra, rb = poses[a].rotation_matrix(), poses[b].rotation_matrix()
            combined = rb @ sb.covariances[b_idx] @ rb.T + ra @ sa.covariances[a_idx] @ ra.T
            whiten = np.transpose(np.linalg.cholesky(np.linalg.inv(combined)), (0, 2, 1))
            out.append(_Link(a, b, sa.xyz[a_idx], sb.xyz[b_idx], whiten))
        return out

    def link_terms(self, poses: Sequence[PoseSE3], link: _Link
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Отбелённые остатки (K, 3) и якобианы по δ_a и δ_b (K, 3, 6)."""
        x = poses[link.a].apply(link.p)
        y = poses[link.b].apply(link.q)
        r = np.einsum("kij,kj->ki", link.whiten, y - x)
        eye = np.broadcast_to(np.eye(3), (len(x), 3, 3))
        jac_a = np.concatenate([skew(x), -eye], axis=2)
        jac_b = np.concatenate([-skew(y), eye], axis=2)
        return r, link.whiten @ jac_a, link.whiten @ jac_b

    def cost(self, poses: Sequence[PoseSE3], links: Sequence[_Link]) -> float:
        total = 0.0
        for link in links:
            d = poses[link.b].apply(link.q) - poses[link.a].apply(link.p)
            r = np.einsum("kij,kj->ki", link.whiten, d)
            total += float(np.sum(r * r))
        return total

    def residual_jacobian(self, poses: Sequence[PoseSE3], links: Sequence[_Link]
                          ) -> Tuple[np.ndarray, np.ndarray]:
        """Плотные r и J по всем 6·n параметрам (включая опорный скан)."""
        n = len(self.scans)
        rows_r, rows_j = [], []
        for link in links:
            r, jac_a, jac_b = self.link_terms(poses, link)
            block = np.zeros((len(r), 3, 6 * n))
            block[:, :, 6 * link.a:6 * link.a + 6] += jac_a
            block[:, :, 6 * link.b:6 * link.b + 6] += jac_b
            rows_r.append(r.reshape(-1))
            rows_j.append(block.reshape(-1, 6 * n))
        return np.concatenate(rows_r), np.concatenate(rows_j)

    def normal_equations(self, poses: Sequence[PoseSE3], links: Sequence[_Link]
                         ) -> Tuple[np.ndarray, np.ndarray]:
        """H и g по свободным позам (1..n-1)."""
        n = len(self.scans)
        hess = np.zeros((6 * n, 6 * n))
        grad = np.zeros(6 * n)
        for link in links:
            r, jac_a, jac_b = self.link_terms(poses, link)
            sa, sb = slice(6 * link.a, 6 * link.a + 6), slice(6 * link.b, 6 * link.b + 6)
            hess[sa, sa] += np.einsum("kia,kib->ab", jac_a, jac_a)
            hess[sb, sb] += np.einsum("kia,kib->ab", jac_b, jac_b)
            cross = np.einsum("kia,kib->ab", jac_a, jac_b)
            hess[sa, sb] += cross
            hess[sb, sa] += cross.T
            grad[sa] += np.einsum("kia,ki->a", jac_a, r)
            grad[sb] += np.einsum("kia,ki->a", jac_b, r)
        return hess[6:, 6:], grad[6:]


def _apply_step(poses: Sequence[PoseSE3], step: np.ndarray) -> List[PoseSE3]:
    out = [poses[0]]
    for i, pose in enumerate(poses[1:]):
        out.append(retract(pose, step[6 * i:6 * i + 6]))
    return out


def register_batch(problem: GicpBatchProblem) -> BatchResult:
    """LM по позам окна; соответствия пересчитываются на каждой внешней итерации.

    Остановка: относительное изменение стоимости < 1e-8, норма шага < 1e-10
    или 50 внешних итераций. Несходимость не исключение: converged=False + WARNING.
    """
    poses = list(problem.initial_poses)
    lam = LM_LAMBDA_INIT
    history: List[float] = []
    step_costs: List[List[float]] = []
    converged = False
    links: List[_Link] = []
    cost = 0.0
    iteration = 0
    for iteration in range(1, MAX_OUTER_ITERATIONS + 1):
        links = problem.links(poses)
        if not links:
            raise RuntimeError("GICP batch has no correspondences; scans are disjoint or diverged")
        cost = problem.cost(poses, links)
        history.append(cost)
        accepted = [cost]
        if cost == 0.0:
            converged = True
            break

        start_cost, last_step = cost, np.inf
        for _ in range(MAX_LM_STEPS):
            hess, grad = problem.normal_equations(poses, links)
            damping = lam * np.diag(np.maximum(np.diag(hess), 1e-12))
            try:
                step = np.linalg.solve(hess + damping, -grad)
            except np.linalg.LinAlgError:
                lam *= LM_LAMBDA_FACTOR
                continue
            trial = _apply_step(poses, step)
            trial_cost = problem.cost(trial, links)
            if trial_cost < cost:
                poses, cost = trial, trial_cost
                accepted.append(cost)
                lam = max(lam / LM_LAMBDA_FACTOR, 1e-12)
                last_step = float(np.linalg.norm(step))
                if last_step < STEP_TOLERANCE:
                    break
            else:
                lam *= LM_LAMBDA_FACTOR
                if lam > LM_LAMBDA_MAX:
                    break
        step_costs.append(accepted)
        if (start_cost - cost) <= REL_COST_TOLERANCE * start_cost or last_step < STEP_TOLERANCE:
            converged = True
            break

    count = sum(len(link.p) for link in links)
    if not converged:
        logger.warning("GICP batch did not converge in %d iterations (cost %.6g)", iteration, cost)
    else:
        logger.info("GICP batch of %d scans converged in %d iterations (cost %.6g, %d pairs matched)",
                    len(problem), iteration, cost, count)
    return BatchResult(poses, converged, iteration, cost, count, history, step_costs)


# --- граф поз ------------------------------------------------------------------

@dataclass(frozen=True)
class PoseEdge:
    i: int
    j: int
    observation: PoseSE3
    information: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.information, dtype=np.float64)
        if info.shape != (6, 6):
            raise ValueError(f"edge information must be 6x6, got {info.shape}")
        if not np.allclose(info, info.T):
            raise ValueError("edge information must be symmetric")
        object.__setattr__(self, "information", info)


@dataclass
class PoseGraph:
    nodes: List[PoseSE3]
    edges: List[PoseEdge] = field(default_factory=list)

    def add_edge(self, i: int, j: int, observation: PoseSE3,
                 information: Optional[np.ndarray] = None) -> None:
        n = len(self.nodes)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"invalid edge ({i}, {j}) for {n} nodes")
        self.edges.append(PoseEdge(i, j, observation, np.eye(6) if information is None else information))

    def check_connected(self) -> None:
        n = len(self.nodes)
        if n == 0:
            raise ValueError("pose graph has no nodes")
        rows = [e.i for e in self.edges]
        cols = [e.j for e in self.edges]
        adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        components, _ = connected_components(adjacency, directed=False)
        if components > 1:
            raise ValueError(f"pose graph is disconnected ({components} components)")


def inverse_right_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    wx = skew(phi)
    if theta < 1e-6:
        coeff = 1.0 / 12.0
    else:
        coeff = 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * wx + coeff * (wx @ wx)


def edge_error(edge: PoseEdge, xi: PoseSE3, xj: PoseSE3) -> np.ndarray:
    """log(Z⁻¹ ∘ X_i⁻¹ ∘ X_j) как (вектор поворота, перенос)."""
    err = edge.observation.inverse().compose(xi.inverse().compose(xj))
    return np.concatenate([err.rot.as_rotvec(), err.translation])


def edge_jacobians(edge: PoseEdge, xi: PoseSE3, xj: PoseSE3) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    e = edge_error(edge, xi, xj)
    jr_inv = inverse_right_jacobian(e[:3])
    ri, rj = xi.rotation_matrix(), xj.rotation_matrix()
    rzi = edge.observation.rotation_matrix().T @ ri.T
    tj = skew(xj.translation)

    jac_j = np.zeros((6, 6))
    jac_j[:3, :3] = jr_inv @ rj.T
    jac_j[3:, :3] = -rzi @ tj
    jac_j[3:, 3:] = rzi

    jac_i = np.zeros((6, 6))
    jac_i[:3, :3] = -jr_inv @ rj.T
    jac_i[3:, :3] = rzi @ tj
    jac_i[3:, 3:] = -rzi
    return e, jac_i, jac_j


@dataclass
class PoseGraphResult:
    poses: List[PoseSE3]
    converged: bool
    iterations: int
    gradient_norm: float
    initial_residuals: List[float]
    final_residuals: List[float]


def _graph_cost(graph: PoseGraph, nodes: Sequence[PoseSE3]) -> float:
    total = 0.0
    for edge in graph.edges:
        e = edge_error(edge, nodes[edge.i], nodes[edge.j])
        total += float(e @ edge.information @ e)
    return total


def _graph_system(graph: PoseGraph, nodes: Sequence[PoseSE3]):
    n = len(nodes)
    rows, cols, vals = [], [], []
    grad = np.zeros(6 * n)
    block = np.arange(6)
    for edge in graph.edges:
        e, jac_i, jac_j = edge_jacobians(edge, nodes[edge.i], nodes[edge.j])
        info = edge.information
        for a, ja in ((edge.i, jac_i), (edge.j, jac_j)):
            grad[6 * a:6 * a + 6] += ja.T @ info @ e
            for b, jb in ((edge.i, jac_i), (edge.j, jac_j)):
                rows.append(np.repeat(6 * a + block, 6))
                cols.append(np.tile(6 * b + block, 6))
                vals.append((ja.T @ info @ jb).reshape(-1))
    hess = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(6 * n, 6 * n)).tocsc()
    return hess[6:, 6:], grad[6:]


def optimize_pose_graph(graph: PoseGraph) -> PoseGraphResult:
    """Гаусс–Ньютон (с демпфированием при росте стоимости); узел 0 закреплён.

    Сходимость: норма градиента < 1e-8.
    """
    graph.check_connected()
    nodes = list(graph.nodes)
    initial = [float(np.linalg.norm(edge_error(e, nodes[e.i], nodes[e.j]))) for e in graph.edges]
    if len(nodes) == 1:
        return PoseGraphResult(nodes, True, 0, 0.0, initial, initial)

    cost = _graph_cost(graph, nodes)
    lam = 0.0
    grad_norm = np.inf
    converged = False
    iteration = 0
    for iteration in range(GRAPH_MAX_ITERATIONS + 1):
        hess, grad = _graph_system(graph, nodes)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < GRAPH_GRADIENT_TOLERANCE:
            converged = True
            break
        if iteration == GRAPH_MAX_ITERATIONS:
            break
        while True:
            system = hess + lam * sparse_identity(hess.shape[0], format="csc") if lam else hess
            try:
                step = splu(system.tocsc()).solve(-grad)
            except RuntimeError as exc:
                raise ValueError(f"singular pose-graph normal equations: {exc}") from exc
            if not np.all(np.isfinite(step)):
                raise ValueError("singular pose-graph normal equations")
            trial = [nodes[0]] + [retract(p, step[6 * k:6 * k + 6]) for k, p in enumerate(nodes[1:])]
            trial_cost = _graph_cost(graph, trial)
            if trial_cost <= cost or lam > 1e12:
                nodes, cost = trial, trial_cost
                lam = lam / 10.0 if lam > 1e-9 else 0.0
                break
            lam = max(lam * 10.0, 1e-6)

    final = [float(np.linalg.norm(edge_error(e, nodes[e.i], nodes[e.j]))) for e in graph.edges]
    if not converged:
        logger.warning("Pose graph did not converge (gradient norm %.3g)", grad_norm)
    return PoseGraphResult(nodes, converged, iteration, grad_norm, initial, final)


# --- последовательность -----------------------------------------------------------

def batch_windows(n: int, batch: int = BATCH_SIZE) -> List[range]:
    """Окна по batch сканов, соседние окна делят один скан."""
    if batch < 2:
        raise ValueError(f"batch size must be at least 2, got {batch}")
    windows, start = [], 0
    while start < n - 1:
        windows.append(range(start, min(start + batch, n)))
        start += batch - 1
    return windows


@dataclass
class SequenceRegistration:
    sequence: ScanSequence
    batches: List[BatchResult]
    graph: PoseGraphResult


def _chain_initial_poses(prepared: Sequence[PreparedScan], max_distance: float) -> List[PoseSE3]:
    """Попарный GICP соседних сканов с прогнозом постоянной скорости."""
    poses = [PoseSE3.identity()]
    velocity = PoseSE3.identity()
    for a, b in zip(prepared, prepared[1:]):
        # поза b в кадре a: ищем T_b при T_a = I
        result = register_batch(GicpBatchProblem([a, b], [PoseSE3.identity(), velocity], max_distance))
        velocity = result.poses[1]
        poses.append(poses[-1].compose(velocity))
    return poses


def register_sequence_report(seq: ScanSequence, batch: int = BATCH_SIZE, *,
                             max_distance: float = MAX_CORRESPONDENCE_DISTANCE,
                             k: int = DEFAULT_NEIGHBORS, epsilon: float = DEFAULT_EPSILON,
                             executor: Optional[Executor] = None) -> SequenceRegistration:
    n = len(seq)
    if n < 2:
        raise ValueError(f"registration needs at least 2 scans, got {n}")
    mapper = executor.map if executor is not None else map
    prepared = list(mapper(lambda s: PreparedScan.prepare(s, k, epsilon), seq.scans))
    initial = _chain_initial_poses(prepared, max_distance)

    windows = batch_windows(n, batch)
    problems = [GicpBatchProblem([prepared[i] for i in w], [initial[i] for i in w], max_distance)
                for w in windows]
    results = list(mapper(register_batch, problems))
    logger.info("Registered %d batches over %d scans", len(results), n)

    graph = PoseGraph([PoseSE3.identity()] * n)
    adjacent = {}
    for window, problem, result in zip(windows, problems, results):
        info = np.eye(6) * max(result.correspondence_count, 1)
        local = list(window)
        for a, b in problem.pairs:
            observation = result.poses[a].inverse().compose(result.poses[b])
            graph.add_edge(local[a], local[b], observation, info)
            if b == a + 1:
                adjacent.setdefault(local[a], observation)
    nodes = [PoseSE3.identity()]
    for i in range(n - 1):
        nodes.append(nodes[-1].compose(adjacent[i]))
    graph.nodes = nodes

    graph_result = optimize_pose_graph(graph)
    poses = [graph_result.poses[0].inverse().compose(p) for p in graph_result.poses]
    return SequenceRegistration(seq.with_poses(poses), results, graph_result)


def register_sequence(seq: ScanSequence, batch: int = BATCH_SIZE, **kwargs) -> ScanSequence:
    return register_sequence_report(seq, batch, **kwargs).sequence
