import numpy as np
import pytest

from pillar_edge import nn
from pillar_edge.errors import CalibrationError, FingerprintError, FormatError, TruncationError
from pillar_edge.frames import SynthParams, gen_synthetic_scene
from pillar_edge.model import INPUT_SITE, activation_sites, backbone_head_forward, init_random_weights, layer_plan
from pillar_edge.pillars import encode
from pillar_edge.quant import (
    CONCAT_SITE_ID,
    MAX_ABS_FLOOR,
    CalibStats,
    accel_execute,
    calibrate,
    compile_model,
    decode_compiled,
    encode_compiled,
    load_compiled,
    save_compiled,
)

from conftest import tiny_config

SCENE = dict(range_x=(1.0, 15.0), range_y=(-7.0, 7.0), n_cars=2, ground_density=10.0)


def scenes(cfg, store, seeds):
    return [encode(gen_synthetic_scene(SynthParams(seed=s, **SCENE), s)[0], store, cfg.grid) for s in seeds]


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    store = init_random_weights(cfg, 3)
    calib = scenes(cfg, store, range(100, 116))
    stats = calibrate(store, cfg, calib)
    return cfg, store, calib, stats, compile_model(store, cfg, stats)


def test_zero_frame_floors_every_site(tiny):
    store = init_random_weights(tiny, 0)
    stats = calibrate(store, tiny, [np.zeros((8, 32, 32), np.float32)])
    assert set(stats.max_abs) == set(activation_sites(tiny))
    assert all(v == MAX_ABS_FLOOR for v in stats.max_abs.values())
    assert stats.n_frames == 1


def test_empty_calibration_set(tiny):
    with pytest.raises(CalibrationError):
        calibrate(init_random_weights(tiny, 0), tiny, [])


def test_calibration_monotone_in_frame_set(setup):
    cfg, store, calib, _, _ = setup
    small = calibrate(store, cfg, calib[:4])
    large = calibrate(store, cfg, calib[:10])
    assert all(large.max_abs[s] >= small.max_abs[s] for s in small.max_abs)


def test_input_site_is_max_abs_cell(setup):
    _, _, calib, stats, _ = setup
    assert stats.max_abs[INPUT_SITE] == pytest.approx(max(float(np.abs(p.data).max()) for p in calib))


def test_percentile_mode_is_tighter(setup):
    cfg, store, calib, stats, _ = setup
    pct = calibrate(store, cfg, calib, mode="percentile", percentile=99.0)
    assert pct.mode == "percentile"
    assert all(pct.max_abs[s] <= stats.max_abs[s] for s in stats.max_abs)
    with pytest.raises(ValueError):
        calibrate(store, cfg, calib, mode="entropy")


def test_calib_stats_json_round_trip(tmp_path, setup):
    stats = setup[3]
    f = tmp_path / "calib.json"
    stats.save(f)
    back = CalibStats.load(f)
    assert back.max_abs == stats.max_abs and back.fingerprint == stats.fingerprint and back.n_frames == stats.n_frames
    f.write_text("{}")
    with pytest.raises(FormatError):
        CalibStats.load(f)


def test_activation_scale_from_max_abs(tiny):
    store = init_random_weights(tiny, 0)
    stats = CalibStats({s: 12.7 for s in activation_sites(tiny)}, 1, tiny.fingerprint())
    model = compile_model(store, tiny, stats)
    assert model.input_scale == pytest.approx(0.1)
    assert all(layer.output_scale == pytest.approx(0.1) for layer in model.layers)


def test_zero_weight_channel(tiny):
    store = init_random_weights(tiny, 0)
    w = store["backbone.block0.conv0.weight"].copy()
    w[3] = 0.0
    stats = CalibStats({s: 1.0 for s in activation_sites(tiny)}, 1, tiny.fingerprint())
    layer = compile_model(store.replace(**{"backbone.block0.conv0.weight": w}), tiny, stats).layers[0]
    assert layer.weight_scales[3] == 1e-9
    assert not layer.weights[3].any()


def test_fingerprint_mismatch(setup):
    cfg, store, _, stats, model = setup
    other = tiny_config(up_channels=4, blocks=((2, 1, 8), (2, 1, 8), (2, 1, 8)))
    with pytest.raises(FingerprintError):
        compile_model(init_random_weights(other, 0), other, stats)
    with pytest.raises(FingerprintError):
        accel_execute(model, np.zeros((8, 32, 32), np.float32), other)


def test_missing_site(setup):
    cfg, store, _, stats, _ = setup
    partial = CalibStats({k: v for k, v in stats.max_abs.items() if k != "head.box"}, 1, stats.fingerprint)
    with pytest.raises(CalibrationError):
        compile_model(store, cfg, partial)


def test_concat_consumers_read_sentinel_site(setup):
    cfg, _, _, stats, model = setup
    heads = [layer for layer in model.layers if layer.kind == "head"]
    assert [layer.input_site for layer in heads] == [CONCAT_SITE_ID, CONCAT_SITE_ID]
    ups = [f"backbone.up{i}" for i in range(3)]
    assert heads[0].input_scale == pytest.approx(max(stats.max_abs[u] for u in ups) / 127)


def test_serialization_double_round_trip(tmp_path, setup):
    model = setup[4]
    data = encode_compiled(model)
    again = decode_compiled(data)
    assert encode_compiled(again) == data
    assert again == model
    f = tmp_path / "m.ppq"
    save_compiled(model, f)
    assert load_compiled(f) == model


def test_ppq_corruption(setup):
    data = encode_compiled(setup[4])
    with pytest.raises(FormatError):
        decode_compiled(b"PPW1" + data[4:])
    with pytest.raises(TruncationError):
        decode_compiled(data[:-10])
    with pytest.raises(FormatError):
        decode_compiled(data + b"\x00")


def test_zero_input_zero_output(setup):
    cfg, _, _, _, model = setup
    out = accel_execute(model, np.zeros((8, 32, 32), np.float32), cfg)
    assert not out.cls_map.any() and not out.box_map.any()


def test_execution_is_deterministic(setup):
    cfg, store, _, _, model = setup
    x = scenes(cfg, store, [7])[0]
    a, b = accel_execute(model, x, cfg), accel_execute(decode_compiled(encode_compiled(model)), x, cfg)
    assert np.array_equal(a.cls_map, b.cls_map) and np.array_equal(a.box_map, b.box_map)


def test_compile_is_deterministic(setup):
    cfg, store, calib, stats, model = setup
    assert encode_compiled(compile_model(store, cfg, calibrate(store, cfg, calib))) == encode_compiled(model)


def test_agreement_with_float_path(setup):
    cfg, store, _, _, model = setup
    for x in scenes(cfg, store, range(5)):
        f = backbone_head_forward(x, store, cfg)
        q = accel_execute(model, x, cfg)
        fo = np.concatenate([f.cls_map.ravel(), f.box_map.ravel()])
        qo = np.concatenate([q.cls_map.ravel(), q.box_map.ravel()])
        assert np.abs(qo - fo).mean() <= 0.1 * fo.std()


def test_bn_is_folded_by_compile(setup, rng):
    cfg, store, calib, _, _ = setup
    updates = {}
    for layer in layer_plan(cfg):
        if store.has_bn(layer.name):
            c = layer.spec.out_ch
            updates[f"{layer.name}.bn.gamma"] = rng.uniform(0.5, 1.5, c)
            updates[f"{layer.name}.bn.mean"] = rng.uniform(0.0, 0.2, c)
    bn_store = store.replace(**updates)
    stats = calibrate(bn_store, cfg, calib)
    model = compile_model(bn_store, cfg, stats)
    x = calib[0]
    f = backbone_head_forward(x, bn_store, cfg)
    q = accel_execute(model, x, cfg)
    assert np.abs(q.box_map - f.box_map).mean() <= 0.1 * f.box_map.std()


def test_saturation_never_overflows(setup):
    cfg, store, calib, _, model = setup
    hot = calib[0].data * 50.0  # far beyond the calibrated range
    out = accel_execute(model, hot, cfg)
    assert np.isfinite(out.cls_map).all() and np.isfinite(out.box_map).all()
    assert np.abs(out.cls_map).max() <= 127 * model.layers[-2].output_scale + 1e-9
    for layer in model.layers:
        nn.check_accumulator_bound(layer.spec.in_ch * layer.spec.k * layer.spec.k)
        assert layer.spec.in_ch * layer.spec.k * layer.spec.k < 2**31 // 16129


def test_compiled_model_needs_no_weight_store(setup):
    cfg, store, calib, _, model = setup
    blob = encode_compiled(model)
    del store  # execution reads only the artifact
    out = accel_execute(decode_compiled(blob), calib[1])
    assert out.cls_map.shape == (2, 16, 16)

