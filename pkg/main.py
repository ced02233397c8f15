"""Командная строка: этапы пайплайна «файл → файл».

    python main.py synth --demo static -o out/
    python main.py register out/manifest.json -o out/poses.txt
    python main.py voxelize out/manifest.json --poses out/poses.txt --center scan_0020 -o out/window.evx
    python main.py project out/window.evx -o out/target/

Ошибка любого этапа даёт одну JSON-строку в stderr и ненулевой код выхода
(1: ошибка этапа или ввода-вывода, 2: неверные аргументы или конфигурация).
"""

import argparse
import json
import logging
import math
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

import pipeline
from config import PipelineConfig, load_config
from pipeline import EvidentialPipeline

logger = logging.getLogger(__name__)

EXIT_STAGE = 1
EXIT_USAGE = 2

# флаги, которые переопределяют поля PipelineConfig с тем же именем
_CONFIG_FLAGS = tuple(PipelineConfig.model_fields)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with PipelineConfig overrides")
    common.add_argument("--threads", type=int, help="worker threads (default: EVIGRID_THREADS or all cores)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evigrid", description="Evidential occupancy grid maps from range scans")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]

    p = sub.add_parser("synth", parents=common, help="simulate a labelled scan sequence")
    p.add_argument("scene", nargs="?", help="SceneSpec JSON")
    p.add_argument("--demo", help="built-in scene: static, occlusion, moving_box, corridor")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--rate", type=float, help="scan rate, Hz")
    p.add_argument("--duration", type=float, help="seconds after the trajectory start")
    p.add_argument("--seed", type=int, help="range-noise seed")

    p = sub.add_parser("register", parents=common, help="register a sequence, write TUM-style poses")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True, help="pose file")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-distance", dest="max_correspondence_distance", type=float)

    p = sub.add_parser("ground-fit", parents=common, help="robust ground plane of a scan or registered sequence")
    p.add_argument("input", help=".evs scan or sequence manifest")
    p.add_argument("--poses", help="pose file (needed for a manifest)")
    p.add_argument("-o", "--out", required=True, help="plane JSON")
    p.add_argument("--scale", dest="plane_scale", type=float, help="Cauchy scale, m")

    p = sub.add_parser("voxelize", parents=common, help="evidential voxel map of a time window")
    p.add_argument("manifest")
    p.add_argument("--poses", required=True)
    p.add_argument("--center", required=True, help="center scan id")
    p.add_argument("-o", "--out", required=True, help="EVX1 voxel map")
    p.add_argument("--window", type=float, help="half window, s")
    p.add_argument("--pose-radius", dest="pose_radius", type=float,
                   help="select scans by sensor distance instead of time, m")
    p.add_argument("--ground-band", dest="ground_band", type=float)
    p.add_argument("--multipath-cutoff", dest="multipath_cutoff", type=float)

    p = sub.add_parser("project", parents=common, help="corridor pillars to a belief grid")
    p.add_argument("voxels", help="EVX1 voxel map")
    p.add_argument("-o", "--out", required=True, help="grid directory")
    p.add_argument("--plane", help="plane JSON (default: voxelize sidecar)")
    p.add_argument("--low", dest="corridor_low", type=float)
    p.add_argument("--high", dest="corridor_high", type=float)

    p = sub.add_parser("input-grid", parents=common, help="six-layer grid of one scan")
    p.add_argument("input", help=".evs scan or sequence manifest")
    p.add_argument("--scan", help="scan id when the input is a manifest")
    p.add_argument("--plane", help="plane JSON (default: fit on the scan)")
    p.add_argument("-o", "--out", required=True, help="grid directory")
    p.add_argument("--ground-band", dest="ground_band", type=float)
    p.add_argument("--multipath-cutoff", dest="multipath_cutoff", type=float)

    p = sub.add_parser("augment", parents=common, help="rotated and shifted crop of a grid")
    p.add_argument("grid")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--rotation", type=float, help="radians")
    p.add_argument("--offset", type=float, nargs=2, metavar=("DX", "DY"), help="meters")
    p.add_argument("--size", dest="crop_cells", type=int, help="crop size, cells")
    p.add_argument("--seed", type=int, help="draw rotation and offset at random")

    p = sub.add_parser("evaluate", parents=common, help="compare a predicted belief grid with a target")
    p.add_argument("pred")
    p.add_argument("target")
    p.add_argument("-o", "--out", help="report JSON (default: stdout)")
    p.add_argument("--heatmaps", help="directory for per-cell metric PGMs")
    p.add_argument("--k", dest="certainty_k", type=float, help="certainty weighting k")
    p.add_argument("--asym-k", dest="asym_k", type=float)
    p.add_argument("--asym-sign", dest="asym_sign", type=int, choices=(1, -1))

    p = sub.add_parser("render", parents=common, help="white-to-red PNG of grid layers")
    p.add_argument("grid")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--layers", nargs="+")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = vars(args)
    out = {name: values.get(name) for name in _CONFIG_FLAGS if name in values}
    if args.command == "synth":
        # у synth --seed задаёт шум сенсора, а не поле конфигурации
        out.pop("seed", None)
    return out


def run(args: argparse.Namespace, config: PipelineConfig) -> Optional[dict]:
    pipe = EvidentialPipeline(config)
    cmd = args.command
    if cmd == "synth":
        scene = pipeline.load_scene(args.scene, args.demo, args.seed)
        return {"manifest": pipe.synth(scene, args.out, args.rate, args.duration)}
    if cmd == "register":
        result = pipe.register(args.manifest, args.out)
        return {"poses": args.out, "batches": len(result.batches),
                "converged": all(b.converged for b in result.batches) and result.graph.converged}
    if cmd == "ground-fit":
        fit = pipe.ground_fit(args.input, args.out, args.poses)
        return {"plane": fit.plane.to_json(), "iterations": fit.iterations}
    if cmd == "voxelize":
        window_map = pipe.voxelize(args.manifest, args.poses, args.center, args.out)
        return {"voxels": len(window_map.voxel_map), "scans": len(window_map.scan_indices)}
    if cmd == "project":
        grid = pipe.project(args.voxels, args.out, args.plane)
        return {"determinate_cells": grid.determinate_cells()}
    if cmd == "input-grid":
        pipe.input_grid(args.input, args.out, args.scan, args.plane)
        return {"grid": args.out}
    if cmd == "augment":
        pipe.augment(args.grid, args.out, args.rotation, args.offset, args.seed)
        return {"grid": args.out}
    if cmd == "evaluate":
        report = pipe.evaluate(args.pred, args.target, args.out, args.heatmaps)
        return report.model_dump(mode="json")
    if cmd == "render":
        return {"images": pipe.render(args.grid, args.out, args.layers)}
    raise UsageError(f"unknown command {cmd!r}")


def _fail(command: Optional[str], exc: BaseException) -> None:
    line = {"command": command, "detail": str(exc), "error": type(exc).__name__}
    print(json.dumps(line, sort_keys=True, ensure_ascii=False), file=sys.stderr)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=logging.INFO)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail(None, exc)
        return EXIT_USAGE

    try:
        config = load_config(args.config, _overrides(args))
    except (ValidationError, RuntimeError, ValueError, OSError) as exc:
        _fail(args.command, exc)
        return EXIT_USAGE

    try:
        summary = run(args, config)
    except UsageError as exc:
        _fail(args.command, exc)
        return EXIT_USAGE
    except Exception as exc:
        logger.error("Command %s failed: %s", args.command, exc)
        _fail(args.command, exc)
        return EXIT_STAGE
    if summary is not None:
        print(json.dumps(_finite(summary), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
