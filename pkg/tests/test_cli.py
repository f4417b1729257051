import json

import pytest

from pillar_edge.cli import build_parser, main
from pillar_edge.config import Thresholds
from pillar_edge.evaluation import perturb_gt_to_dets
from pillar_edge.frames import Box3D, Dataset, read_labels
from pillar_edge.model import backbone_head_forward, load_weights
from pillar_edge.pillars import encode
from pillar_edge.postprocess import Detection, gen_anchors, postprocess, read_detections, write_detections
from pillar_edge.quant import load_compiled
from pillar_edge.runtime import build_stages, run_sequential

from conftest import tiny_config

SMALL = {
    "grid": {"x_min": 0.0, "x_max": 16.0, "y_min": -8.0, "y_max": 8.0, "pillar_size": 0.5, "max_pillars": 1024,
             "out_channels": 8},
    "model": {"blocks": [[2, 1, 8], [2, 1, 8], [2, 1, 8]], "up_strides": [1, 2, 4], "up_channels": 8},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.delenv("PILLAR_EDGE_CONFIG", raising=False)
    f = tmp_path / "small.json"
    f.write_text(json.dumps(SMALL))
    return f


@pytest.fixture
def chain(tmp_path, cfg_file):
    data = tmp_path / "data"
    assert run("synth", "--scenes", 3, "--out", data, "--seed", 7, "--cars", 2, "--config", cfg_file) == 0
    assert run("init-weights", "--out", tmp_path / "w.ppw", "--seed", 1, "--config", cfg_file) == 0
    assert run("calibrate", "--weights", tmp_path / "w.ppw", "--data", data, "--out", tmp_path / "c.json",
               "--config", cfg_file) == 0
    assert run("compile", "--weights", tmp_path / "w.ppw", "--calib", tmp_path / "c.json", "--out",
               tmp_path / "m.ppq", "--config", cfg_file) == 0
    return tmp_path, data, cfg_file


def test_synth_layout_and_determinism(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--scenes", 2, "--seed", 7, "--out", a) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["000000.bin", "000000.txt", "000001.bin", "000001.txt", "manifest.json"]
    assert run("synth", "--scenes", 2, "--seed", 7, "--out", b) == 0
    for n in names[:-1]:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    for m in (ma, mb):
        m.pop("started"), m.pop("finished"), m.pop("outputs")
    assert ma == mb and ma["subcommand"] == "synth" and ma["seed"] == 7


def test_synth_zero_scenes(tmp_path, cfg_file):
    out = tmp_path / "empty"
    assert run("synth", "--scenes", 0, "--out", out) == 0
    assert [p.name for p in out.iterdir()] == ["manifest.json"]


def test_full_chain_produces_loadable_artifacts(chain):
    tmp, _, _ = chain
    model = load_compiled(tmp / "m.ppq")
    assert model.fingerprint == tiny_config().fingerprint()
    assert set(load_weights(tmp / "m.cpu.ppw")) == {k for k in load_weights(tmp / "w.ppw") if k.startswith("pfn.")}
    for name in ("w.ppw", "c.json", "m.ppq"):
        manifest = json.loads((tmp / f"{name}.manifest.json").read_text())
        assert manifest["config_fingerprint"] == tiny_config().fingerprint().hex()


def test_compile_is_byte_reproducible(chain):
    tmp, _, cfg = chain
    assert run("compile", "--weights", tmp / "w.ppw", "--calib", tmp / "c.json", "--out", tmp / "m2.ppq",
               "--config", cfg) == 0
    assert (tmp / "m2.ppq").read_bytes() == (tmp / "m.ppq").read_bytes()


def test_compile_rejects_foreign_calibration(chain, capsys, monkeypatch):
    tmp, data, cfg = chain
    monkeypatch.setenv("PILLAR_EDGE_CONFIG", str(cfg))
    other = dict(SMALL, model=dict(SMALL["model"], up_channels=4))
    f = tmp / "other.json"
    f.write_text(json.dumps(other))
    assert run("init-weights", "--out", tmp / "o.ppw", "--config", f) == 0
    capsys.readouterr()
    assert run("compile", "--weights", tmp / "o.ppw", "--calib", tmp / "c.json", "--out", tmp / "x.ppq",
               "--config", f) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: fingerprint: ") and err.count("\n") == 1


def test_infer_matches_manual_composition(chain):
    tmp, data, cfg = chain
    assert run("infer", "--weights", tmp / "w.ppw", "--data", data, "--out", tmp / "f.jsonl", "--config", cfg) == 0
    config = tiny_config()
    store = load_weights(tmp / "w.ppw")
    anchors = gen_anchors(config)
    manual = []
    for cloud in Dataset.open(data).frames():
        head = backbone_head_forward(encode(cloud, store, config.grid), store, config)
        manual.extend(postprocess(head, anchors, Thresholds(), cloud.frame_id))
    ref = tmp / "manual.jsonl"
    write_detections(manual, ref)
    assert (tmp / "f.jsonl").read_bytes() == ref.read_bytes()
    stats = json.loads((tmp / "f.stats.json").read_text())
    assert stats["frames"] == 3


def test_infer_pipeline_flag_is_transparent(chain):
    tmp, data, cfg = chain
    assert run("infer", "--compiled", tmp / "m.ppq", "--data", data, "--out", tmp / "s.jsonl", "--config", cfg) == 0
    assert run("infer", "--compiled", tmp / "m.ppq", "--data", data, "--out", tmp / "p.jsonl", "--pipeline",
               "--queue-depth", 1, "--in-flight", 2, "--config", cfg) == 0
    assert (tmp / "s.jsonl").read_bytes() == (tmp / "p.jsonl").read_bytes()
    assert len(read_detections(tmp / "s.jsonl")) > 0


def test_infer_compiled_matches_library(chain):
    tmp, data, cfg = chain
    assert run("infer", "--compiled", tmp / "m.ppq", "--data", data, "--out", tmp / "q.jsonl", "--config", cfg) == 0
    stages = build_stages(tiny_config(), Thresholds(), load_weights(tmp / "m.cpu.ppw"), load_compiled(tmp / "m.ppq"))
    dets, _ = run_sequential(list(Dataset.open(data).frames()), stages)
    ref = tmp / "ref.jsonl"
    write_detections(dets, ref)
    assert (tmp / "q.jsonl").read_bytes() == ref.read_bytes()


def test_infer_empty_data_dir(chain):
    tmp, _, cfg = chain
    (tmp / "none").mkdir()
    assert run("infer", "--weights", tmp / "w.ppw", "--data", tmp / "none", "--out", tmp / "e.jsonl",
               "--config", cfg) == 0
    assert (tmp / "e.jsonl").read_text() == ""


def test_infer_requires_exactly_one_model(chain, capsys):
    tmp, data, cfg = chain
    assert run("infer", "--data", data, "--out", tmp / "x.jsonl", "--config", cfg) == 2
    assert run("infer", "--weights", tmp / "w.ppw", "--compiled", tmp / "m.ppq", "--data", data,
               "--out", tmp / "x.jsonl", "--config", cfg) == 2
    err = capsys.readouterr().err.splitlines()
    assert all(line.startswith("error: usage: ") for line in err) and len(err) == 2


def test_infer_missing_model_file(chain, capsys):
    tmp, data, cfg = chain
    assert run("infer", "--weights", tmp / "nope.ppw", "--data", data, "--out", tmp / "x.jsonl", "--config", cfg) == 1
    assert capsys.readouterr().err.startswith("error: io: ")


def test_eval_oracle_detections(chain, capsys):
    tmp, data, cfg = chain
    gts = {i: read_labels(data / f"{i:06d}.txt") for i in range(3)}
    write_detections(perturb_gt_to_dets(gts, 0.0, 0.0, 0.0, seed=0), tmp / "oracle.jsonl")
    capsys.readouterr()
    assert run("eval", "--dets", tmp / "oracle.jsonl", "--labels", data, "--json", tmp / "r.json") == 0
    out = capsys.readouterr().out
    assert "f1=1.000000" in out and "precision=1.000000" in out
    assert json.loads((tmp / "r.json").read_text())["f1"] == 1.0


def test_eval_defaults_and_range_check(capsys):
    args = build_parser().parse_args(["eval", "--dets", "d", "--labels", "l"])
    assert (args.iou, args.conf) == (0.3, 0.3)
    assert main(["eval", "--dets", "d", "--labels", "l", "--conf", "1.01"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: usage: ") and "--conf" in err and err.count("\n") == 1


def test_eval_unknown_frame(chain, capsys):
    tmp, data, _ = chain
    write_detections([Detection(99, "Car", 0.9, Box3D(1, 1, 0, 4, 2, 1.5, 0))], tmp / "bad.jsonl")
    assert run("eval", "--dets", tmp / "bad.jsonl", "--labels", data) == 1
    assert capsys.readouterr().err.startswith("error: evaluation: ")


def test_help_sources_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--help"])
    assert e.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    assert "default 0.3, as in the reported results table" in text
    with pytest.raises(SystemExit):
        main(["bench", "--help"])
    assert "default 5.0, the reported real-time rate" in " ".join(capsys.readouterr().out.split())


def test_bench_reports_both_modes(chain, capsys):
    tmp, data, cfg = chain
    capsys.readouterr()
    assert run("bench", "--compiled", tmp / "m.ppq", "--data", data, "--frames", 40, "--stage-delays", "10,30,10",
               "--json", tmp / "b.json", "--config", cfg) == 0
    out = capsys.readouterr().out
    assert "[sequential]" in out and "[pipelined]" in out and "detections_identical=true" in out
    rep = json.loads((tmp / "b.json").read_text())
    for mode in ("sequential", "pipelined"):
        d = rep[mode]
        assert d["throughput_hz"] == pytest.approx(d["frames"] / d["wall_time_s"], rel=1e-4)
    assert rep["pipelined"]["throughput_hz"] >= 1.4 * rep["sequential"]["throughput_hz"]
    assert (tmp / "b.json.manifest.json").exists()


def test_bench_rejects_zero_frames(chain, capsys):
    tmp, data, cfg = chain
    assert run("bench", "--compiled", tmp / "m.ppq", "--data", data, "--frames", 0, "--config", cfg) == 2


def test_bad_stage_delays(capsys):
    assert main(["bench", "--compiled", "m", "--data", "d", "--stage-delays", "10,30"]) == 2
    assert "stage-delays" in capsys.readouterr().err


def test_config_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PILLAR_EDGE_CONFIG", str(tmp_path / "missing.json"))
    assert main(["init-weights", "--out", str(tmp_path / "w.ppw")]) == 1
    assert capsys.readouterr().err.startswith("error: config: ")
    f = tmp_path / "small.json"
    f.write_text(json.dumps(SMALL))
    monkeypatch.setenv("PILLAR_EDGE_CONFIG", str(f))
    assert main(["init-weights", "--out", str(tmp_path / "w.ppw")]) == 0
    manifest = json.loads((tmp_path / "w.ppw.manifest.json").read_text())
    assert manifest["config"]["grid"]["pillar_size"] == 0.5


def test_bad_config_key(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PILLAR_EDGE_CONFIG", raising=False)
    f = tmp_path / "bad.json"
    f.write_text(json.dumps({"grid": {"pillar": 1}}))
    assert main(["init-weights", "--out", str(tmp_path / "w.ppw"), "--config", str(f)]) == 1
    assert capsys.readouterr().err.startswith("error: config: ")
