"""Calibration, int8 compilation and the simulated accelerator.

The compiled artifact (``.ppq``) is self-contained: topology, int8 weights,
int32 biases and every scale are stored explicitly, so execution never
touches the float :class:`~pillar_edge.model.WeightStore`.

``.ppq`` layout (little-endian)::

    b"PPQ1"  u32 layer_count
    per layer:
        u8 kind (0 conv, 1 tconv, 2 head conv)
        u32 in_ch, out_ch, k, s, p
        u32 input_site          (0 = subgraph input, n = output of layer n-1,
                                 0xFFFFFFFF = channel concat of all tconv outputs;
                                 branch scale ratios are pre-folded into weights)
        f64 input_scale
        u32 n_channels, f64[n_channels] weight scales
        i8 weights              (conv/head [out,in,k,k]; tconv [in,out,k,k])
        i32[out_ch] biases
        f64 output_scale
    32-byte config fingerprint (sha256 of the canonical ModelConfig JSON)
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .config import ModelConfig
from .errors import CalibrationError, FingerprintError, FormatError, ShapeError
from .model import (
    CONCAT_SITE,
    INPUT_SITE,
    HeadOutput,
    WeightStore,
    ByteReader,
    activation_sites,
    backbone_head_forward,
    fold_store,
    layer_plan,
)
from .pillars import PseudoImage

PPQ_MAGIC = b"PPQ1"
CONCAT_SITE_ID = 0xFFFFFFFF
KIND_CODES = {"conv": 0, "tconv": 1, "head": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
MAX_ABS_FLOOR = 1e-6
WEIGHT_SCALE_FLOOR = 1e-9


@dataclass
class CalibStats:
    max_abs: dict[str, float]
    n_frames: int
    fingerprint: bytes
    mode: str = "max"

    def to_json(self) -> str:
        payload = {
            "fingerprint": self.fingerprint.hex(),
            "mode": self.mode,
            "n_frames": self.n_frames,
            "max_abs": self.max_abs,
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibStats":
        try:
            d = json.loads(text)
            return cls(
                {k: float(v) for k, v in d["max_abs"].items()},
                int(d["n_frames"]),
                bytes.fromhex(d["fingerprint"]),
                d.get("mode", "max"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"calibration file: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CalibStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def calibrate(
    store: WeightStore,
    config: ModelConfig,
    frames: Iterable[PseudoImage],
    mode: str = "max",
    percentile: float = 99.9,
) -> CalibStats:
    """Record the largest |activation| at every site over the calibration frames.

    In ``"percentile"`` mode each frame contributes its ``percentile`` of |x|
    instead of the true maximum; the running value is still a maximum over frames.
    """
    if mode not in ("max", "percentile"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    running = {site: 0.0 for site in activation_sites(config)}

    def record(site: str, act: np.ndarray) -> None:
        a = np.abs(act)
        v = float(a.max()) if mode == "max" or a.size == 0 else float(np.percentile(a, percentile))
        if v > running[site]:
            running[site] = v

    n = 0
    for frame in frames:
        backbone_head_forward(frame, store, config, trace=record)
        n += 1
    if n == 0:
        raise CalibrationError("calibration set is empty")
    max_abs = {site: max(v, MAX_ABS_FLOOR) for site, v in running.items()}
    return CalibStats(max_abs, n, config.fingerprint(), mode)


@dataclass(frozen=True, eq=False)
class CompiledLayer:
    kind: str
    spec: nn.ConvSpec
    input_site: int
    input_scale: float
    weight_scales: np.ndarray  # f64 [out_ch]
    weights: np.ndarray  # int8
    biases: np.ndarray  # int32 [out_ch]
    output_scale: float

    @property
    def relu(self) -> bool:
        return self.kind != "head"


@dataclass(frozen=True, eq=False)
class CompiledModel:
    layers: list[CompiledLayer]
    fingerprint: bytes
    names: list[str] = field(default_factory=list)  # informational, not serialized

    def check_fingerprint(self, config: ModelConfig) -> None:
        if config.fingerprint() != self.fingerprint:
            raise FingerprintError("compiled model was built for a different model config")

    @property
    def input_scale(self) -> float:
        return self.layers[0].input_scale

    def to_bytes(self) -> bytes:
        return encode_compiled(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompiledModel):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def _weight_scales(w: np.ndarray, out_axis: int) -> np.ndarray:
    axes = tuple(a for a in range(w.ndim) if a != out_axis)
    return np.maximum(np.abs(w.astype(np.float64)).max(axis=axes) / nn.QMAX, WEIGHT_SCALE_FLOOR)


def compile_model(store: WeightStore, config: ModelConfig, stats: CalibStats) -> CompiledModel:
    """Quantize the backbone + head into a :class:`CompiledModel`.

    Batch norm still present in ``store`` is folded first. Activation scale
    per site is ``max_abs / 127``. Upsampling branches keep their own scales;
    layers reading the concatenation use the largest branch scale as input
    scale, with each branch's scale ratio folded into their weights before
    weight quantization.
    """
    if stats.fingerprint != config.fingerprint():
        raise FingerprintError("calibration stats were recorded for a different model config")
    plan = layer_plan(config)
    missing = [s for s in activation_sites(config) if s not in stats.max_abs]
    if missing:
        raise CalibrationError(f"calibration stats missing sites: {missing}")
    if any(store.has_bn(layer.name) for layer in plan):
        store = fold_store(store, config)

    scale = {site: stats.max_abs[site] / nn.QMAX for site in activation_sites(config)}
    ups = [layer for layer in plan if layer.kind == "tconv"]
    scale[CONCAT_SITE] = max(scale[u.name] for u in ups)
    # Each branch keeps its own int8 grid; the consumer sees the concat on the
    # largest branch scale with the per-branch ratio folded into its weights.
    concat_rescale = np.concatenate(
        [np.full(u.spec.out_ch, scale[u.name] / scale[CONCAT_SITE]) for u in ups]
    )
    site_id = {INPUT_SITE: 0, CONCAT_SITE: CONCAT_SITE_ID}
    site_id.update({layer.name: i + 1 for i, layer in enumerate(plan)})

    layers = []
    for layer in plan:
        w = store[f"{layer.name}.weight"].astype(np.float64)
        b = store[f"{layer.name}.bias"].astype(np.float64)
        if layer.source == CONCAT_SITE:
            w = w * concat_rescale[None, :, None, None]
        w_scales = _weight_scales(w, layer.out_axis)
        x_scale = scale[layer.source]
        out_scale = scale[layer.name]
        layers.append(
            CompiledLayer(
                kind=layer.kind,
                spec=layer.spec,
                input_site=site_id[layer.source],
                input_scale=x_scale,
                weight_scales=w_scales,
                weights=nn.quantize(w, w_scales, axis=layer.out_axis),
                biases=nn.quantize_bias(b, x_scale, w_scales),
                output_scale=out_scale,
            )
        )
    return CompiledModel(layers, config.fingerprint(), [layer.name for layer in plan])


def accel_execute(model: CompiledModel, pseudo: PseudoImage | np.ndarray, config: ModelConfig | None = None) -> HeadOutput:
    """Run the compiled graph with int8 kernels and dequantize the two head outputs."""
    if config is not None:
        model.check_fingerprint(config)
        g = config.grid
        expected = (g.out_channels, g.H, g.W)
        shape = (pseudo.data if isinstance(pseudo, PseudoImage) else np.asarray(pseudo)).shape
        if shape != expected:
            raise ShapeError(f"pseudo-image shape {shape} != {expected}")
    x = pseudo.data if isinstance(pseudo, PseudoImage) else np.asarray(pseudo, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != model.layers[0].spec.in_ch:
        raise ShapeError(f"pseudo-image shape {x.shape} does not match compiled input channels")
    sites: dict[int, np.ndarray] = {0: nn.quantize(x, model.input_scale)}
    ups: list[np.ndarray] = []
    heads: list[tuple[np.ndarray, float]] = []
    for i, layer in enumerate(model.layers):
        if layer.input_site == CONCAT_SITE_ID:
            if CONCAT_SITE_ID not in sites:
                sites[CONCAT_SITE_ID] = np.concatenate(ups, axis=0)
        elif layer.input_site not in sites:
            raise FormatError(f"layer {i} reads site {layer.input_site} before it is produced")
        xq = sites[layer.input_site]
        args = (layer.biases, layer.input_scale, layer.weight_scales, layer.output_scale)
        if layer.kind == "tconv":
            y = nn.tconv2d_i8(xq, layer.weights, *args, stride=layer.spec.s, relu_out=True)
            ups.append(y)
        else:
            y = nn.conv2d_i8(xq, layer.weights, *args, spec=layer.spec, relu_out=layer.relu)
        sites[i + 1] = y
        if layer.kind == "head":
            heads.append((y, layer.output_scale))
    if len(heads) != 2:
        raise FormatError(f"compiled model must end in two head convs, found {len(heads)}")
    (cls_q, cls_s), (box_q, box_s) = heads
    return HeadOutput(nn.dequantize(cls_q, cls_s), nn.dequantize(box_q, box_s))


# ---------------------------------------------------------------- file format


def encode_compiled(model: CompiledModel) -> bytes:
    parts = [PPQ_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        s = layer.spec
        parts.append(struct.pack("<B5IId", KIND_CODES[layer.kind], s.in_ch, s.out_ch, s.k, s.s, s.p,
                                 layer.input_site, layer.input_scale))
        ws = np.asarray(layer.weight_scales, dtype="<f8")
        parts.append(struct.pack("<I", ws.size) + ws.tobytes())
        parts.append(np.ascontiguousarray(layer.weights, dtype=np.int8).tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<i4").tobytes())
        parts.append(struct.pack("<d", layer.output_scale))
    if len(model.fingerprint) != 32:
        raise FormatError("fingerprint must be 32 bytes")
    parts.append(model.fingerprint)
    return b"".join(parts)


def decode_compiled(data: bytes) -> CompiledModel:
    r = ByteReader(data, "compiled model")
    if r.take(4, "magic") != PPQ_MAGIC:
        raise FormatError("compiled model: bad magic (expected PPQ1)")
    (count,) = r.unpack("<I", "layer count")
    layers = []
    for i in range(count):
        kind, in_ch, out_ch, k, s, p, site, in_scale = r.unpack("<B5IId", f"layer {i} header")
        if kind not in KIND_NAMES:
            raise FormatError(f"compiled model: layer {i} has unknown kind {kind}")
        spec = nn.ConvSpec(in_ch, out_ch, k, s, p)
        (n_ch,) = r.unpack("<I", f"layer {i} scale count")
        if n_ch != out_ch:
            raise FormatError(f"compiled model: layer {i} has {n_ch} weight scales for {out_ch} channels")
        w_scales = np.frombuffer(r.take(8 * n_ch, f"layer {i} weight scales"), dtype="<f8").astype(np.float64)
        shape = (in_ch, out_ch, k, k) if KIND_NAMES[kind] == "tconv" else (out_ch, in_ch, k, k)
        weights = np.frombuffer(r.take(math.prod(shape), f"layer {i} weights"), dtype=np.int8).reshape(shape).copy()
        biases = np.frombuffer(r.take(4 * out_ch, f"layer {i} biases"), dtype="<i4").astype(np.int32)
        (out_scale,) = r.unpack("<d", f"layer {i} output scale")
        layers.append(CompiledLayer(KIND_NAMES[kind], spec, site, in_scale, w_scales, weights, biases, out_scale))
    fingerprint = r.take(32, "fingerprint")
    if not r.done():
        raise FormatError("compiled model: trailing bytes after fingerprint")
    return CompiledModel(layers, fingerprint)


def save_compiled(model: CompiledModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_compiled(model))


def load_compiled(path: str | os.PathLike) -> CompiledModel:
    return decode_compiled(Path(path).read_bytes())
