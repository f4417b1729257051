"""Three-stage inference runtime: CPU encode -> accelerator -> CPU decode/NMS.

``run_pipelined`` connects one worker thread per stage with bounded FIFO
queues. A frame is admitted by the source only while fewer than
``in_flight_max`` frames sit between admission (send) and the sink
(receive); the sink reorders by sequence id, so output order always equals
input order and the detection stream matches ``run_sequential`` exactly.

Optional per-stage delays pad each stage to a fixed minimum latency. They
make throughput measurements independent of the host machine.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .config import DEFAULT_TARGET_HZ, ModelConfig, Thresholds
from .errors import ConfigError, PipelineError
from .frames import PointCloud
from .model import WeightStore, backbone_head_forward, validate_store
from .pillars import encode
from .postprocess import Detection, gen_anchors, postprocess
from .quant import CompiledModel, accel_execute

STAGE_NAMES = ("pre", "accel", "post")

StageFn = Callable[[Any, int], Any]


@dataclass(frozen=True)
class StagePlan:
    queue_depth: int = 2
    in_flight_max: int = 4

    def __post_init__(self) -> None:
        if self.queue_depth < 1 or self.in_flight_max < 1:
            raise ConfigError("queue_depth and in_flight_max must be >= 1")


@dataclass(frozen=True)
class Stages:
    """Stage callables, each ``fn(payload, frame_id) -> payload``.

    ``post`` must return the frame's list of detections.
    """

    pre: StageFn
    accel: StageFn
    post: StageFn

    def as_list(self) -> list[StageFn]:
        return [self.pre, self.accel, self.post]


def build_stages(
    config: ModelConfig,
    thresholds: Thresholds,
    weights: WeightStore,
    compiled: CompiledModel | None = None,
) -> Stages:
    """Wire the encoder, the float or compiled backbone, and postprocess.

    ``weights`` must hold the PFN tensors; the backbone tensors are used only
    when ``compiled`` is None (float reference path).
    """
    grid = config.grid
    anchors = gen_anchors(config)
    if compiled is None:
        validate_store(weights, config)

        def accel(pseudo, fid):
            return backbone_head_forward(pseudo, weights, config)
    else:
        compiled.check_fingerprint(config)

        def accel(pseudo, fid):
            return accel_execute(compiled, pseudo, config)

    def pre(cloud: PointCloud, fid: int):
        return encode(cloud, weights, grid)

    def post(head, fid: int) -> list[Detection]:
        return postprocess(head, anchors, thresholds, fid)

    return Stages(pre, accel, post)


@dataclass(frozen=True)
class LatencySummary:
    mean: float
    p50: float
    p95: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> "LatencySummary":
        if not len(samples):
            return cls(0.0, 0.0, 0.0)
        a = np.asarray(samples, dtype=np.float64)
        return cls(float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95)))


@dataclass(frozen=True)
class PipelineStats:
    frames: int
    wall_time: float
    stage_latency: dict[str, LatencySummary] = field(default_factory=dict)
    end_to_end: LatencySummary = LatencySummary(0.0, 0.0, 0.0)
    mode: str = "sequential"

    @property
    def throughput(self) -> float:
        return self.frames / self.wall_time if self.wall_time > 0 else 0.0


def _frame_id(frame: Any, seq: int) -> int:
    return frame.frame_id if isinstance(frame, PointCloud) else seq


def _run_stage(fn: StageFn, payload: Any, fid: int, delay: float) -> tuple[Any, float]:
    t0 = time.perf_counter()
    out = fn(payload, fid)
    elapsed = time.perf_counter() - t0
    if delay > elapsed:
        time.sleep(delay - elapsed)
        elapsed = time.perf_counter() - t0
    return out, elapsed


def _delays(stage_delays: Sequence[float] | None) -> tuple[float, float, float]:
    if stage_delays is None:
        return (0.0, 0.0, 0.0)
    if len(stage_delays) != 3 or any(d < 0 for d in stage_delays):
        raise ConfigError("stage delays must be three non-negative values (pre, accel, post)")
    return tuple(float(d) for d in stage_delays)


def _flatten(per_frame: Iterable[Any]) -> list[Any]:
    out: list[Any] = []
    for item in per_frame:
        out.extend(item)
    return out


def run_sequential(
    frames: Iterable[Any], stages: Stages, stage_delays: Sequence[float] | None = None
) -> tuple[list[Detection], PipelineStats]:
    """Process frames one at a time through all three stages (delays in seconds)."""
    delays = _delays(stage_delays)
    fns = stages.as_list()
    lat: dict[str, list[float]] = {n: [] for n in STAGE_NAMES}
    e2e: list[float] = []
    results = []
    t_start = time.perf_counter()
    for seq, frame in enumerate(frames):
        fid = _frame_id(frame, seq)
        t0 = time.perf_counter()
        payload = frame
        for name, fn, delay in zip(STAGE_NAMES, fns, delays):
            try:
                payload, dt = _run_stage(fn, payload, fid, delay)
            except Exception as exc:
                raise PipelineError(f"stage {name} failed on frame {fid}: {exc}", fid) from exc
            lat[name].append(dt)
        results.append(payload)
        e2e.append(time.perf_counter() - t0)
    wall = time.perf_counter() - t_start
    stats = PipelineStats(
        len(results), wall if results else 0.0, {n: LatencySummary.of(v) for n, v in lat.items()}, LatencySummary.of(e2e)
    )
    return _flatten(results), stats


@dataclass
class _Envelope:
    seq: int
    fid: int
    payload: Any
    admitted: float
    latency: dict[str, float] = field(default_factory=dict)
    error: BaseException | None = None
    failed_stage: str | None = None


_END = object()


def run_pipelined(
    frames: Iterable[Any],
    stages: Stages,
    plan: StagePlan = StagePlan(),
    stage_delays: Sequence[float] | None = None,
) -> tuple[list[Detection], PipelineStats]:
    """Run the stages concurrently; same output as :func:`run_sequential`."""
    delays = _delays(stage_delays)
    queues = [queue.Queue(maxsize=plan.queue_depth) for _ in range(len(STAGE_NAMES) + 1)]
    window = threading.Semaphore(plan.in_flight_max)
    abort = threading.Event()
    source_error: list[BaseException] = []

    def source() -> None:
        try:
            for seq, frame in enumerate(frames):
                window.acquire()
                if abort.is_set():
                    window.release()
                    break
                queues[0].put(_Envelope(seq, _frame_id(frame, seq), frame, time.perf_counter()))
        except BaseException as exc:  # frame iterator failed (e.g. unreadable file)
            source_error.append(exc)
        finally:
            queues[0].put(_END)

    def worker(idx: int) -> None:
        name, fn, delay = STAGE_NAMES[idx], stages.as_list()[idx], delays[idx]
        inq, outq = queues[idx], queues[idx + 1]
        while True:
            env = inq.get()
            if env is _END:
                outq.put(_END)
                return
            if env.error is None and not abort.is_set():
                try:
                    env.payload, env.latency[name] = _run_stage(fn, env.payload, env.fid, delay)
                except Exception as exc:
                    env.error, env.failed_stage, env.payload = exc, name, None
            outq.put(env)

    threads = [threading.Thread(target=source, name="pipeline-source", daemon=True)]
    threads += [threading.Thread(target=worker, args=(i,), name=f"pipeline-{n}", daemon=True) for i, n in enumerate(STAGE_NAMES)]
    t_start = time.perf_counter()
    for t in threads:
        t.start()

    pending: dict[int, _Envelope] = {}
    ordered: list[Any] = []
    lat: dict[str, list[float]] = {n: [] for n in STAGE_NAMES}
    e2e: list[float] = []
    failure: _Envelope | None = None
    next_seq = 0
    sink = queues[-1]
    while True:
        env = sink.get()
        if env is _END:
            break
        window.release()
        if env.error is not None and failure is None:
            failure = env
            abort.set()
        if failure is not None:
            continue
        e2e.append(time.perf_counter() - env.admitted)
        for n, v in env.latency.items():
            lat[n].append(v)
        pending[env.seq] = env
        while next_seq in pending:
            ordered.append(pending.pop(next_seq).payload)
            next_seq += 1
    wall = time.perf_counter() - t_start
    for t in threads:
        t.join()

    if failure is not None:
        raise PipelineError(
            f"stage {failure.failed_stage} failed on frame {failure.fid}: {failure.error}", failure.fid
        ) from failure.error
    if source_error:
        raise PipelineError(f"frame source failed: {source_error[0]}") from source_error[0]
    if pending:
        raise PipelineError(f"sequence gap: frames {sorted(pending)[:5]} never completed")
    stats = PipelineStats(
        len(ordered),
        wall if ordered else 0.0,
        {n: LatencySummary.of(v) for n, v in lat.items()},
        LatencySummary.of(e2e),
        mode="pipelined",
    )
    return _flatten(ordered), stats


def stats_to_dict(stats: PipelineStats) -> dict[str, Any]:
    d = {
        "mode": stats.mode,
        "frames": stats.frames,
        "wall_time_s": stats.wall_time,
        "throughput_hz": stats.throughput,
        "end_to_end_s": asdict(stats.end_to_end),
        "stage_latency_s": {n: asdict(s) for n, s in stats.stage_latency.items()},
    }
    return _round_floats(d)


def _round_floats(obj: Any) -> Any:
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    return obj


def bench_report(stats: PipelineStats, target_hz: float = DEFAULT_TARGET_HZ) -> tuple[str, dict[str, Any]]:
    """Render throughput and latency percentiles, flagged PASS/FAIL against ``target_hz``."""
    if stats.frames == 0:
        d = {"mode": stats.mode, "frames": 0, "status": "no data", "target_hz": target_hz}
        return f"[{stats.mode}] no data\n", d
    d = stats_to_dict(stats)
    d["target_hz"] = target_hz
    d["status"] = "PASS" if d["throughput_hz"] >= target_hz else "FAIL"
    lines = [
        f"[{d['mode']}]",
        f"frames={d['frames']}",
        f"wall_time_s={d['wall_time_s']:.6f}",
        f"throughput_hz={d['throughput_hz']:.6f}",
        f"target_hz={target_hz:.6f}",
        f"status={d['status']}",
    ]
    e = d["end_to_end_s"]
    lines.append(f"end_to_end_s mean={e['mean']:.6f} p50={e['p50']:.6f} p95={e['p95']:.6f}")
    for n, s in d["stage_latency_s"].items():
        lines.append(f"stage_{n}_s mean={s['mean']:.6f} p50={s['p50']:.6f} p95={s['p95']:.6f}")
    return "\n".join(lines) + "\n", d


def report_json(d: dict[str, Any]) -> str:
    return json.dumps(d, sort_keys=True)
