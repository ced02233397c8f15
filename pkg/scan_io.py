"""Файловые форматы пайплайна.

- EVS1: скан, little-endian: magic "EVS1", u32 число точек, f64 время, затем 4×f32 (x, y, z, intensity).
- позы: текст, строка на скан `scan_id tx ty tz qx qy qz qw`.
- манифест последовательности: JSON `{"scans": [{"id", "path", "timestamp"}]}`, пути относительно манифеста.
- EVX1: воксельная карта: magic, f64 ребро, 3×f64 начало, u64 число записей,
  затем записи (i32 ix, iy, iz, u32 m, u32 n), отсортированные по (ix, iy, iz).
- каталог сетки: grid.json + 16-битный PGM на слой; строка 0 изображения — iy = 0.
"""

import json
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel

from core import PointCloud, PoseSE3, ScanSequence
from ground import PlaneParams
from mapping import (BELIEF_LAYERS, LAYER_NAMES, BeliefGrid, EvidentialVoxelMap, MapGeometry,
                     MultiLayerGridMap)

logger = logging.getLogger(__name__)

EVS_MAGIC = b"EVS1"
EVS_HEADER = struct.Struct("<4sId")
EVS_POINT = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])

EVX_MAGIC = b"EVX1"
EVX_HEADER = struct.Struct("<4sd3dQ")
EVX_RECORD = np.dtype([("ix", "<i4"), ("iy", "<i4"), ("iz", "<i4"), ("m", "<u4"), ("n", "<u4")])

PGM_MAX = 65535
GRID_SIDECAR = "grid.json"
MANIFEST_NAME = "manifest.json"


def dump_json(path: str, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")


def load_json(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# --- сканы --------------------------------------------------------------------

def write_scan(path: str, cloud: PointCloud) -> None:
    records = np.zeros(len(cloud), dtype=EVS_POINT)
    records["x"], records["y"], records["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    records["intensity"] = cloud.intensity
    with open(path, "wb") as f:
        f.write(EVS_HEADER.pack(EVS_MAGIC, len(cloud), cloud.timestamp))
        f.write(records.tobytes())


def read_scan(path: str, scan_id: Optional[str] = None) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < EVS_HEADER.size:
        raise ValueError(f"{path}: file too short for an EVS1 header")
    magic, count, timestamp = EVS_HEADER.unpack_from(raw)
    if magic != EVS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {EVS_MAGIC!r}")
    payload = raw[EVS_HEADER.size:]
    if len(payload) != count * EVS_POINT.itemsize:
        raise ValueError(f"{path}: truncated payload ({len(payload)} bytes for {count} points)")
    records = np.frombuffer(payload, dtype=EVS_POINT)
    xyz = np.column_stack([records["x"], records["y"], records["z"]]).astype(np.float64)
    intensity = records["intensity"].astype(np.float64)
    out_of_range = int(np.count_nonzero((intensity < 0.0) | (intensity > 1.0)))
    if out_of_range:
        logger.warning("%s: %d intensities outside [0, 1] clamped", path, out_of_range)
        intensity = np.clip(intensity, 0.0, 1.0)
    if scan_id is None:
        scan_id = os.path.splitext(os.path.basename(path))[0]
    return PointCloud(xyz, intensity, timestamp, scan_id)


class ManifestEntry(BaseModel):
    id: str
    path: str
    timestamp: float
    labels: Optional[str] = None


class Manifest(BaseModel):
    scans: List[ManifestEntry]


def write_sequence(out_dir: str, seq: ScanSequence,
                   labels: Optional[Sequence[np.ndarray]] = None) -> str:
    """Сканы в out_dir/scans/, манифест в out_dir/manifest.json; возвращает путь манифеста."""
    scan_dir = os.path.join(out_dir, "scans")
    os.makedirs(scan_dir, exist_ok=True)
    entries = []
    for i, scan in enumerate(seq.scans):
        rel = os.path.join("scans", f"{scan.scan_id}.evs")
        write_scan(os.path.join(out_dir, rel), scan)
        entry = ManifestEntry(id=scan.scan_id, path=rel, timestamp=scan.timestamp)
        if labels is not None:
            entry.labels = os.path.join("scans", f"{scan.scan_id}.labels.npy")
            np.save(os.path.join(out_dir, entry.labels), np.asarray(labels[i], dtype=np.int32))
        entries.append(entry)
    path = os.path.join(out_dir, MANIFEST_NAME)
    dump_json(path, Manifest(scans=entries).model_dump(exclude_none=True))
    return path


def read_manifest(path: str) -> Manifest:
    return Manifest.model_validate(load_json(path))


def read_sequence(manifest_path: str, poses_path: Optional[str] = None) -> ScanSequence:
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    scans = []
    for entry in manifest.scans:
        cloud = read_scan(os.path.join(base, entry.path), entry.id)
        if abs(cloud.timestamp - entry.timestamp) > 1e-9:
            logger.warning("Scan %s: header timestamp %.9f differs from manifest %.9f; using manifest",
                           entry.id, cloud.timestamp, entry.timestamp)
            cloud = PointCloud(cloud.xyz, cloud.intensity, entry.timestamp, entry.id)
        scans.append(cloud)
    seq = ScanSequence(tuple(scans))
    logger.info("Loaded %d scans from %s", len(seq), manifest_path)
    if poses_path is not None:
        seq = attach_poses(seq, read_poses(poses_path))
    return seq


def read_labels(manifest_path: str) -> Dict[str, np.ndarray]:
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return {e.id: np.load(os.path.join(base, e.labels)) for e in manifest.scans if e.labels}


# --- позы -----------------------------------------------------------------------

def write_poses(path: str, scan_ids: Sequence[str], poses: Sequence[PoseSE3]) -> None:
    if len(scan_ids) != len(poses):
        raise ValueError(f"{len(poses)} poses for {len(scan_ids)} scan ids")
    with open(path, "w", encoding="utf-8") as f:
        for scan_id, pose in zip(scan_ids, poses):
            f.write(" ".join([scan_id] + [repr(float(v)) for v in pose.to_tum()]) + "\n")


def read_poses(path: str) -> Dict[str, PoseSE3]:
    poses: Dict[str, PoseSE3] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            poses[parts[0]] = PoseSE3.from_tum([float(v) for v in parts[1:]])
    return poses


def attach_poses(seq: ScanSequence, poses: Dict[str, PoseSE3]) -> ScanSequence:
    missing = [s.scan_id for s in seq.scans if s.scan_id not in poses]
    if missing:
        raise ValueError(f"pose file lacks scans: {', '.join(missing[:5])}")
    return seq.with_poses([poses[s.scan_id] for s in seq.scans])


# --- плоскость и воксели ------------------------------------------------------------

def write_plane(path: str, plane: PlaneParams) -> None:
    dump_json(path, plane.to_json())


def read_plane(path: str) -> PlaneParams:
    return PlaneParams.from_json(load_json(path))


def write_voxel_map(path: str, voxel_map: EvidentialVoxelMap) -> None:
    indices = voxel_map.indices()
    if indices.size and (indices.min() < np.iinfo(np.int32).min or indices.max() > np.iinfo(np.int32).max):
        raise ValueError("voxel index does not fit into i32")
    records = np.zeros(len(voxel_map), dtype=EVX_RECORD)
    records["ix"], records["iy"], records["iz"] = indices[:, 0], indices[:, 1], indices[:, 2]
    records["m"], records["n"] = voxel_map.reflections, voxel_map.transmissions
    with open(path, "wb") as f:
        f.write(EVX_HEADER.pack(EVX_MAGIC, voxel_map.edge, *voxel_map.origin, len(voxel_map)))
        f.write(records.tobytes())


def read_voxel_map(path: str) -> EvidentialVoxelMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < EVX_HEADER.size:
        raise ValueError(f"{path}: file too short for an EVX1 header")
    magic, edge, ox, oy, oz, count = EVX_HEADER.unpack_from(raw)
    if magic != EVX_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {EVX_MAGIC!r}")
    payload = raw[EVX_HEADER.size:]
    if len(payload) != count * EVX_RECORD.itemsize:
        raise ValueError(f"{path}: truncated payload ({len(payload)} bytes for {count} voxels)")
    records = np.frombuffer(payload, dtype=EVX_RECORD)
    indices = np.column_stack([records["ix"], records["iy"], records["iz"]]).astype(np.int64)
    return EvidentialVoxelMap.from_records(edge, (ox, oy, oz), indices,
                                           records["m"].astype(np.int64), records["n"].astype(np.int64))


# --- сетки ------------------------------------------------------------------------

GridLike = Union[BeliefGrid, MultiLayerGridMap]


def _is_fraction(name: str) -> bool:
    return name in BELIEF_LAYERS or name.startswith("intensity")


def quantize(values: np.ndarray) -> np.ndarray:
    """floor(v·65535): сумма квантованных bel_O + bel_F не превышает 65535."""
    return np.floor(np.clip(values, 0.0, 1.0) * PGM_MAX).astype(np.int32)


def write_pgm(path: str, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.int32)).save(path, format="PPM")


def read_pgm(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)


def write_grid(out_dir: str, grid: GridLike, extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    layers = grid.layers
    scales = {}
    for name, arr in layers.items():
        if _is_fraction(name):
            stored, scales[name] = quantize(arr), 1.0 / PGM_MAX
        else:
            clipped = int(np.count_nonzero(arr > PGM_MAX))
            if clipped:
                logger.warning("Layer %s: %d counts above %d clipped", name, clipped, PGM_MAX)
            stored, scales[name] = np.minimum(arr, PGM_MAX).astype(np.int32), 1.0
        write_pgm(os.path.join(out_dir, f"{name}.pgm"), stored)
    sidecar = dict(grid.geometry.to_json())
    sidecar["layers"] = list(layers)
    sidecar["scale"] = scales
    sidecar["kind"] = "belief" if isinstance(grid, BeliefGrid) else "input"
    if extra:
        sidecar.update(extra)
    dump_json(os.path.join(out_dir, GRID_SIDECAR), sidecar)
    logger.info("Grid %dx%d written to %s", grid.geometry.width, grid.geometry.height, out_dir)


def read_grid(grid_dir: str) -> GridLike:
    sidecar = load_json(os.path.join(grid_dir, GRID_SIDECAR))
    geometry = MapGeometry.from_json(sidecar)
    layers = {}
    for name in sidecar["layers"]:
        stored = read_pgm(os.path.join(grid_dir, f"{name}.pgm"))
        if stored.shape != geometry.shape:
            raise ValueError(f"{grid_dir}/{name}.pgm has shape {stored.shape}, expected {geometry.shape}")
        scale = sidecar["scale"][name]
        layers[name] = stored * scale if _is_fraction(name) else stored
    if sidecar.get("kind") == "belief" or set(layers) == set(BELIEF_LAYERS):
        return BeliefGrid(geometry, layers["bel_o"], layers["bel_f"])
    if set(layers) != set(LAYER_NAMES):
        raise ValueError(f"{grid_dir}: unknown layer set {sorted(layers)}")
    return MultiLayerGridMap(geometry, layers)


def read_belief_grid(grid_dir: str) -> BeliefGrid:
    grid = read_grid(grid_dir)
    if not isinstance(grid, BeliefGrid):
        raise ValueError(f"{grid_dir} holds an input grid, not a belief grid")
    return grid


def write_heatmaps(out_dir: str, maps: Dict[str, np.ndarray], scales: Dict[str, float]) -> None:
    """Поячеечные карты метрик как 16-битные PGM; значение = stored / 65535 · scale."""
    os.makedirs(out_dir, exist_ok=True)
    for name, arr in maps.items():
        write_pgm(os.path.join(out_dir, f"{name}.pgm"), quantize(arr / scales[name]))


# --- визуализация ----------------------------------------------------------------------

def white_to_red(values: np.ndarray) -> np.ndarray:
    """0 белый, 1 красный; север сверху."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    fade = np.round(255.0 * (1.0 - v)).astype(np.uint8)
    rgb = np.stack([np.full_like(fade, 255), fade, fade], axis=-1)
    return np.ascontiguousarray(rgb[::-1])


def render_layer(path: str, values: np.ndarray, scale: Optional[float] = None) -> None:
    values = np.asarray(values, dtype=np.float64)
    if scale is None:
        scale = float(values.max()) if values.size and values.max() > 1.0 else 1.0
    Image.fromarray(white_to_red(values / scale), mode="RGB").save(path, format="PNG")


def render_grid(out_dir: str, grid: GridLike, layers: Optional[Sequence[str]] = None) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    available = grid.layers
    for name in layers or list(available):
        if name not in available:
            raise ValueError(f"grid has no layer {name!r}; available: {sorted(available)}")
        path = os.path.join(out_dir, f"{name}.png")
        render_layer(path, available[name])
        written.append(path)
    if isinstance(grid, BeliefGrid) and not layers:
        path = os.path.join(out_dir, "uncertainty.png")
        render_layer(path, grid.uncertainty())
        written.append(path)
    return written
