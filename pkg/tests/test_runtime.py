import json
import random
import time

import numpy as np
import pytest

from pillar_edge.config import Thresholds
from pillar_edge.errors import ConfigError, PipelineError
from pillar_edge.frames import SynthParams, gen_synthetic_scene
from pillar_edge.model import init_random_weights
from pillar_edge.pillars import encode
from pillar_edge.postprocess import gen_anchors, postprocess
from pillar_edge.quant import accel_execute, calibrate, compile_model
from pillar_edge.runtime import (
    LatencySummary,
    PipelineStats,
    StagePlan,
    Stages,
    bench_report,
    build_stages,
    report_json,
    run_pipelined,
    run_sequential,
)

from conftest import tiny_config

SCENE = dict(range_x=(1.0, 15.0), range_y=(-7.0, 7.0), n_cars=2, ground_density=10.0)


@pytest.fixture(scope="module")
def detector():
    cfg = tiny_config()
    store = init_random_weights(cfg, 3)
    frames = [gen_synthetic_scene(SynthParams(seed=s, **SCENE), s)[0] for s in range(12)]
    stats = calibrate(store, cfg, [encode(f, store, cfg.grid) for f in frames[:6]])
    return cfg, store, compile_model(store, cfg, stats), frames


def echo_stages():
    """Stages that tag the payload so the output reveals the processing path."""
    return Stages(lambda x, fid: (x, fid), lambda p, fid: p + ("a",), lambda p, fid: [p + ("post",)])


def test_empty_input():
    dets, stats = run_sequential([], echo_stages())
    assert dets == [] and stats.frames == 0 and stats.throughput == 0.0
    dets, stats = run_pipelined([], echo_stages())
    assert dets == [] and stats.frames == 0


def test_sequential_equals_manual_composition(detector):
    cfg, store, model, frames = detector
    th = Thresholds()
    anchors = gen_anchors(cfg)
    dets, stats = run_sequential(frames, build_stages(cfg, th, store, model))
    manual = []
    for f in frames:
        manual.extend(postprocess(accel_execute(model, encode(f, store, cfg.grid)), anchors, th, f.frame_id))
    assert dets == manual
    assert stats.frames == len(frames)


@pytest.mark.parametrize("qd,inflight", [(1, 1), (1, 4), (2, 4), (4, 2), (8, 8)])
def test_pipelined_equals_sequential(detector, qd, inflight):
    cfg, store, model, frames = detector
    stages = build_stages(cfg, Thresholds(), store, model)
    seq, _ = run_sequential(frames, stages)
    pipe, stats = run_pipelined(frames, stages, StagePlan(qd, inflight))
    assert pipe == seq
    assert stats.frames == len(frames) and stats.mode == "pipelined"


def test_float_path_stages(detector):
    cfg, store, _, frames = detector
    stages = build_stages(cfg, Thresholds(), store)
    assert run_pipelined(frames[:4], stages)[0] == run_sequential(frames[:4], stages)[0]


def test_order_preserved_under_jitter():
    rng = random.Random(0)

    def slow(p, fid):
        time.sleep(rng.random() * 0.002)
        return p

    stages = Stages(lambda x, fid: x, slow, lambda p, fid: [p])
    dets, _ = run_pipelined(range(200), stages, StagePlan(4, 8))
    assert dets == list(range(200))


def test_delay_bound_and_speedup():
    delays = (0.005, 0.015, 0.005)
    stages = echo_stages()
    _, seq = run_sequential(range(100), stages, delays)
    _, pipe = run_pipelined(range(100), stages, StagePlan(2, 4), delays)
    assert pipe.throughput >= 0.9 / 0.015 * 0.9  # allow startup transient over 100 frames
    assert pipe.throughput >= 1.4 * seq.throughput
    assert seq.throughput <= 1 / sum(delays) * 1.02
    assert seq.stage_latency["accel"].p50 >= 0.015


def test_degenerate_plan_serializes():
    delays = (0.004, 0.004, 0.004)
    _, seq = run_sequential(range(60), echo_stages(), delays)
    _, pipe = run_pipelined(range(60), echo_stages(), StagePlan(1, 1), delays)
    assert abs(pipe.throughput - seq.throughput) <= 0.1 * seq.throughput


def test_in_flight_window_is_respected():
    live = []
    peak = [0]

    def pre(x, fid):
        live.append(fid)
        peak[0] = max(peak[0], len(live))
        return x

    def post(x, fid):
        time.sleep(0.001)
        live.remove(fid)
        return [x]

    run_pipelined(range(100), Stages(pre, lambda x, fid: x, post), StagePlan(8, 3))
    assert peak[0] <= 3


@pytest.mark.parametrize("qd", [1, 2, 4, 8])
def test_soak_no_deadlock(qd):
    rng = random.Random(qd)

    def jitter(p, fid):
        if rng.random() < 0.01:
            time.sleep(0.0005)
        return p

    dets, stats = run_pipelined(range(10_000), Stages(jitter, jitter, lambda p, fid: [p]), StagePlan(qd, 4))
    assert dets == list(range(10_000)) and stats.frames == 10_000


def test_stage_failure_reports_frame():
    def accel(p, fid):
        if fid == 7:
            raise RuntimeError("boom")
        return p

    stages = Stages(lambda x, fid: x, accel, lambda p, fid: [p])
    with pytest.raises(PipelineError) as err:
        run_pipelined(range(20), stages)
    assert err.value.frame_id == 7 and "accel" in str(err.value)
    with pytest.raises(PipelineError) as err:
        run_sequential(range(20), stages)
    assert err.value.frame_id == 7


def test_source_failure():
    def frames():
        yield 0
        raise OSError("disk gone")

    with pytest.raises(PipelineError, match="disk gone"):
        run_pipelined(frames(), echo_stages())


def test_invalid_plan_and_delays():
    with pytest.raises(ConfigError):
        StagePlan(0, 1)
    with pytest.raises(ConfigError):
        run_sequential(range(2), echo_stages(), (0.1, 0.1))


def test_bench_report_pass_fail_and_no_data():
    stats = PipelineStats(52, 10.0, {}, LatencySummary(0.1, 0.1, 0.2), "pipelined")
    text, d = bench_report(stats, 5.0)
    assert d["status"] == "PASS" and "status=PASS" in text
    assert bench_report(PipelineStats(48, 10.0), 5.0)[1]["status"] == "FAIL"
    text, d = bench_report(PipelineStats(0, 0.0), 5.0)
    assert "no data" in text and d["status"] == "no data"


def test_bench_report_text_matches_json():
    _, stats = run_pipelined(range(30), echo_stages(), StagePlan(), (0.001, 0.002, 0.001))
    text, d = bench_report(stats, 5.0)
    parsed = dict(line.split("=", 1) for line in text.splitlines()[1:6])
    assert float(parsed["throughput_hz"]) == pytest.approx(d["throughput_hz"], abs=1e-6)
    assert float(parsed["wall_time_s"]) == pytest.approx(d["wall_time_s"], abs=1e-6)
    assert int(parsed["frames"]) == d["frames"] == 30
    assert d["throughput_hz"] == pytest.approx(stats.frames / stats.wall_time, rel=1e-5)
    assert json.loads(report_json(d)) == d


def test_latency_summary():
    s = LatencySummary.of([1.0, 2.0, 3.0, 4.0])
    assert (s.mean, s.p50) == (2.5, 2.5)
    assert s.p95 == pytest.approx(np.percentile([1, 2, 3, 4], 95))
