"""``pillar-edge`` command line: synth -> init-weights -> calibrate -> compile -> infer -> eval -> bench.

Every artifact gets a ``<artifact>.manifest.json`` next to it recording the
subcommand, resolved config, paths, seed and tool version. Failures print a
single ``error: <kind>: <detail>`` line and exit non-zero.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import (
    CONFIG_ENV_VAR,
    DEFAULT_CONF_THR,
    DEFAULT_IOU_THR,
    DEFAULT_TARGET_HZ,
    ModelConfig,
    Thresholds,
    config_to_dict,
    load_config,
)
from .errors import ConfigError, PillarEdgeError
from .evaluation import EvalConfig, evaluate
from .frames import Dataset, SynthParams, frame_id_from_path, frame_path, gen_synthetic_scene, read_labels, write_frame, write_labels
from .model import cpu_weights, init_random_weights, load_weights, save_weights, validate_store
from .pillars import encode
from .postprocess import read_detections, write_detections
from .quant import CalibStats, calibrate, compile_model, load_compiled, save_compiled
from .runtime import StagePlan, bench_report, build_stages, run_pipelined, run_sequential, stats_to_dict

DEFAULT_CALIB_FRAMES = 64  # arbitrary; the calibration set size is not pinned down anywhere
EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage plus a multi-line message
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _delays_ms(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3 or any(v < 0 or not np.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected three non-negative delays in ms, got {text!r}")
    return vals


def _manifest_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".manifest.json")


def _write_manifest(
    path: Path,
    subcommand: str,
    config: ModelConfig,
    thresholds: Thresholds,
    inputs: dict[str, Any],
    outputs: dict[str, Any],
    started: float,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config_to_dict(config, thresholds),
        "config_fingerprint": config.fingerprint().hex(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": time.time(),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(compiled_path: Path) -> Path:
    """Encoder (CPU) weights shipped next to a compiled model."""
    return compiled_path.with_suffix(".cpu.ppw")


def _load_frames(data: Path, limit: int | None = None) -> list:
    ds = Dataset.open(data)
    ids = ds.frame_ids if limit is None else ds.frame_ids[:limit]
    return [ds.frame(i) for i in ids]


def _model_for(args, config: ModelConfig, thresholds: Thresholds):
    """Return (stages, inputs) for the float (--weights) or compiled (--compiled) path."""
    if args.weights is not None:
        store = load_weights(args.weights)
        validate_store(store, config)
        return build_stages(config, thresholds, store), {"weights": args.weights}
    compiled = load_compiled(args.compiled)
    cpu_path = Path(args.cpu_weights) if args.cpu_weights else _sidecar(Path(args.compiled))
    store = load_weights(cpu_path)
    return build_stages(config, thresholds, store, compiled), {"compiled": args.compiled, "cpu_weights": cpu_path}


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # one independent stream per scene, stable under changes to --scenes
    seeds = np.random.SeedSequence(args.seed).generate_state(args.scenes) if args.scenes else []
    written = []
    for fid, s in enumerate(seeds):
        params = SynthParams(
            n_cars=args.cars,
            ground_density=args.ground_density,
            surface_density=args.surface_density,
            noise_sigma=args.noise,
            seed=int(s),
        )
        cloud, labels = gen_synthetic_scene(params, fid)
        write_frame(cloud, frame_path(out, fid))
        write_labels(labels, frame_path(out, fid, ".txt"))
        written.append(fid)
    extra = {"scenes": args.scenes, "cars": args.cars}
    _write_manifest(out / "manifest.json", "synth", config, thresholds, {}, {"dir": out}, started, args.seed, extra)
    print(f"wrote {len(written)} scenes to {out}")
    return 0


def cmd_init_weights(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    out = Path(args.out)
    save_weights(init_random_weights(config, args.seed), out)
    _write_manifest(_manifest_path(out), "init-weights", config, thresholds, {}, {"weights": out}, started, args.seed)
    print(f"wrote {out}")
    return 0


def cmd_calibrate(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    store = load_weights(args.weights)
    validate_store(store, config)
    frames = _load_frames(Path(args.data), args.frames)
    pseudo = (encode(cloud, store, config.grid) for cloud in frames)
    stats = calibrate(store, config, pseudo, mode=args.mode, percentile=args.percentile)
    out = Path(args.out)
    stats.save(out)
    inputs = {"weights": args.weights, "data": args.data}
    extra = {"mode": args.mode, "percentile": args.percentile, "frames": stats.n_frames}
    _write_manifest(_manifest_path(out), "calibrate", config, thresholds, inputs, {"calibration": out}, started, None, extra)
    print(f"calibrated {stats.n_frames} frames -> {out}")
    return 0


def cmd_compile(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    store = load_weights(args.weights)
    validate_store(store, config)
    stats = CalibStats.load(args.calib)
    model = compile_model(store, config, stats)
    out = Path(args.out)
    save_compiled(model, out)
    side = _sidecar(out)
    save_weights(cpu_weights(store), side)
    inputs = {"weights": args.weights, "calibration": args.calib}
    _write_manifest(_manifest_path(out), "compile", config, thresholds, inputs, {"compiled": out, "cpu_weights": side}, started)
    print(f"wrote {out} and {side}")
    return 0


def _plan(args) -> StagePlan:
    return StagePlan(queue_depth=args.queue_depth, in_flight_max=args.in_flight)


def _delays_s(args) -> tuple[float, float, float] | None:
    return None if args.stage_delays is None else tuple(d / 1000.0 for d in args.stage_delays)


def cmd_infer(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    stages, inputs = _model_for(args, config, thresholds)
    frames = _load_frames(Path(args.data))
    if args.pipeline:
        dets, stats = run_pipelined(frames, stages, _plan(args), _delays_s(args))
    else:
        dets, stats = run_sequential(frames, stages, _delays_s(args))
    out = Path(args.out)
    write_detections(dets, out)
    stats_path = Path(args.stats) if args.stats else out.with_suffix(".stats.json")
    stats_path.write_text(json.dumps(stats_to_dict(stats), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs["data"] = args.data
    extra = {"pipeline": args.pipeline, "queue_depth": args.queue_depth, "in_flight": args.in_flight}
    _write_manifest(
        _manifest_path(out), "infer", config, thresholds, inputs, {"detections": out, "stats": stats_path}, started, None, extra
    )
    print(f"{len(dets)} detections over {stats.frames} frames -> {out}")
    return 0


def _read_label_dir(labels: Path) -> dict[int, list]:
    if not labels.is_dir():
        raise FileNotFoundError(f"labels directory not found: {labels}")
    return {frame_id_from_path(p): read_labels(p) for p in sorted(labels.glob("*.txt"))}


def cmd_eval(args, config: ModelConfig, thresholds: Thresholds) -> int:
    dets = read_detections(args.dets)
    gts = _read_label_dir(Path(args.labels))
    report = evaluate(dets, gts, EvalConfig(iou_thr=args.iou, conf_thr=args.conf))
    print("\n".join(report.lines()))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_bench(args, config: ModelConfig, thresholds: Thresholds) -> int:
    started = time.time()
    stages, inputs = _model_for(args, config, thresholds)
    pool = _load_frames(Path(args.data))
    if not pool:
        raise ConfigError(f"no frames in {args.data}")
    frames = list(itertools.islice(itertools.cycle(pool), args.frames))
    delays = _delays_s(args)
    seq_dets, seq_stats = run_sequential(frames, stages, delays)
    pipe_dets, pipe_stats = run_pipelined(frames, stages, _plan(args), delays)
    results = {}
    for stats in (seq_stats, pipe_stats):
        text, d = bench_report(stats, args.target_hz)
        print(text, end="")
        results[stats.mode] = d
    speedup = pipe_stats.throughput / seq_stats.throughput if seq_stats.throughput > 0 else 0.0
    identical = seq_dets == pipe_dets
    print(f"speedup={speedup:.6f}")
    print(f"detections_identical={str(identical).lower()}")
    if args.json:
        out = Path(args.json)
        payload = {"sequential": results["sequential"], "pipelined": results["pipelined"],
                   "speedup": round(speedup, 6), "detections_identical": identical}
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        inputs["data"] = args.data
        extra = {"frames": args.frames, "stage_delays_ms": args.stage_delays, "target_hz": args.target_hz}
        _write_manifest(_manifest_path(out), "bench", config, thresholds, inputs, {"report": out}, started, None, extra)
    return 0


# ---------------------------------------------------------------- parser


def _add_model_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="float weights (.ppw): run the float reference path")
    src.add_argument("--compiled", help="compiled model (.ppq): run the simulated int8 accelerator path")
    p.add_argument("--cpu-weights", help="encoder weights for --compiled (default: the .cpu.ppw written by compile)")


def _add_pipeline_flags(p: argparse.ArgumentParser, pipeline_switch: bool) -> None:
    if pipeline_switch:
        p.add_argument("--pipeline", action="store_true", help="run the three stages concurrently")
    p.add_argument("--queue-depth", type=_positive_int, default=2, help="bounded queue size between stages (default 2)")
    p.add_argument("--in-flight", type=_positive_int, default=4,
                   help="max frames between admission and sink (default 4, an arbitrary window)")
    p.add_argument("--stage-delays", type=_delays_ms, metavar="PRE,ACCEL,POST",
                   help="pad each stage to at least this latency, in ms (e.g. 10,30,10)")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (fallback: ${CONFIG_ENV_VAR}, then built-in defaults)")

    parser = _Parser(prog="pillar-edge", description="Pillar-based LiDAR car detection with a simulated int8 accelerator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic frames and labels")
    p.add_argument("--scenes", type=_non_negative_int, default=10, help="number of scenes (default 10)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--cars", type=_non_negative_int, default=5, help="cars per scene (default 5)")
    p.add_argument("--ground-density", type=float, default=2.0, help="ground points per m^2 (default 2)")
    p.add_argument("--surface-density", type=float, default=40.0, help="car surface points per m^2 (default 40)")
    p.add_argument("--noise", type=float, default=0.02, help="point noise sigma in m (default 0.02)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", parents=[common], help="write a random-weight model (.ppw)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("calibrate", parents=[common], help="record activation ranges over a calibration set")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True, help="directory of frames")
    p.add_argument("--out", required=True, help="calibration JSON")
    p.add_argument("--frames", type=_positive_int, default=DEFAULT_CALIB_FRAMES,
                   help=f"use the first N frames (default {DEFAULT_CALIB_FRAMES}, an arbitrary choice)")
    p.add_argument("--mode", choices=("max", "percentile"), default="max", help="range statistic (default max)")
    p.add_argument("--percentile", type=float, default=99.9, help="percentile for --mode percentile (default 99.9)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compile", parents=[common], help="quantize the backbone and head into a .ppq")
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True, help="calibration JSON from the calibrate step")
    p.add_argument("--out", required=True, help="compiled model (.ppq)")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("infer", parents=[common], help="run detection over a directory of frames")
    _add_model_source(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="detections JSONL")
    p.add_argument("--stats", help="stats JSON (default: <out>.stats.json)")
    _add_pipeline_flags(p, pipeline_switch=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="precision/recall/F1/AP of detections against labels")
    p.add_argument("--dets", required=True, help="detections JSONL")
    p.add_argument("--labels", required=True, help="directory of NNNNNN.txt label files")
    p.add_argument("--iou", type=_unit_interval, default=DEFAULT_IOU_THR,
                   help=f"BEV IoU match threshold (default {DEFAULT_IOU_THR}, as in the reported results table)")
    p.add_argument("--conf", type=_unit_interval, default=DEFAULT_CONF_THR,
                   help=f"confidence threshold (default {DEFAULT_CONF_THR}, as in the reported results table)")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="sequential vs pipelined throughput")
    _add_model_source(p)
    p.add_argument("--data", required=True)
    p.add_argument("--frames", type=_positive_int, default=50, help="frames to run, cycling the data (default 50)")
    p.add_argument("--target-hz", type=float, default=DEFAULT_TARGET_HZ,
                   help=f"throughput target (default {DEFAULT_TARGET_HZ}, the reported real-time rate)")
    p.add_argument("--json", help="write both reports as JSON")
    _add_pipeline_flags(p, pipeline_switch=False)
    p.set_defaults(func=cmd_bench)
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config, thresholds = load_config(args.config)
        return args.func(args, config, thresholds)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except PillarEdgeError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        detail = f"{exc.strerror}: {exc.filename}" if getattr(exc, "filename", None) else _one_line(exc)
        print(f"error: io: {detail}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: value: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
