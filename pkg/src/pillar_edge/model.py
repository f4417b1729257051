"""Backbone + detection head (the offloaded subgraph) and its weight store.

Layer naming::

    pfn.linear.weight                         [C, 9]   (CPU side, not offloaded)
    backbone.block{i}.conv{j}.{weight,bias}   [Cout, Cin, 3, 3]
    backbone.up{i}.{weight,bias}              [Cin, Cout, u, u]
    head.cls.{weight,bias}, head.box.{...}    [Cout, Cin, 1, 1]
    <layer>.bn.{gamma,beta,mean,var,eps}      batch norm, absent once folded
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import nn
from .config import ModelConfig
from .errors import FormatError, ShapeError, TruncationError
from .pillars import PseudoImage

PPW_MAGIC = b"PPW1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("i1")}
BN_FIELDS = ("gamma", "beta", "mean", "var", "eps")

INPUT_SITE = "input"
CONCAT_SITE = "concat"


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # "conv" | "tconv" | "head"
    spec: nn.ConvSpec
    source: str  # site name feeding this layer
    relu: bool

    @property
    def weight_shape(self) -> tuple[int, ...]:
        s = self.spec
        if self.kind == "tconv":
            return (s.in_ch, s.out_ch, s.k, s.k)
        return (s.out_ch, s.in_ch, s.k, s.k)

    @property
    def out_axis(self) -> int:
        return 1 if self.kind == "tconv" else 0


def layer_plan(config: ModelConfig) -> list[LayerDef]:
    """Topologically ordered layers of the backbone + head."""
    layers: list[LayerDef] = []
    in_ch = config.grid.out_channels
    source = INPUT_SITE
    block_outputs = []
    for i, (stride, n_layers, channels) in enumerate(config.blocks):
        for j in range(n_layers):
            name = f"backbone.block{i}.conv{j}"
            spec = nn.ConvSpec(in_ch, channels, 3, stride if j == 0 else 1, 1)
            layers.append(LayerDef(name, "conv", spec, source, True))
            source, in_ch = name, channels
        block_outputs.append((source, channels))
    for i, ((src, ch), up) in enumerate(zip(block_outputs, config.up_strides)):
        spec = nn.ConvSpec(ch, config.up_channels, up, up, 0)
        layers.append(LayerDef(f"backbone.up{i}", "tconv", spec, src, True))
    cat = config.concat_channels
    a = config.n_anchors_per_cell
    layers.append(LayerDef("head.cls", "head", nn.ConvSpec(cat, a * config.n_classes, 1), CONCAT_SITE, False))
    layers.append(LayerDef("head.box", "head", nn.ConvSpec(cat, a * config.box_code_size, 1), CONCAT_SITE, False))
    return layers


def activation_sites(config: ModelConfig) -> list[str]:
    return [INPUT_SITE] + [layer.name for layer in layer_plan(config)]


class WeightStore(Mapping):
    """Immutable name -> array mapping with a stable insertion order."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None) -> None:
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            arr = np.array(arr, copy=True)
            if arr.dtype not in (np.float32, np.int8):
                arr = arr.astype(np.float32)
            arr.setflags(write=False)
            self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise ShapeError(f"missing weight tensor {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        if list(self) != list(other):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )

    def replace(self, **updates: np.ndarray) -> "WeightStore":
        merged = dict(self._tensors)
        merged.update(updates)
        return WeightStore(merged)

    def has_bn(self, layer: str) -> bool:
        return f"{layer}.bn.gamma" in self._tensors

    def bn(self, layer: str) -> tuple:
        vals = [self[f"{layer}.bn.{f}"] for f in BN_FIELDS]
        return (*vals[:4], float(vals[4].reshape(-1)[0]))


def expected_shapes(config: ModelConfig, folded: bool = False) -> dict[str, tuple[int, ...]]:
    c = config.grid.out_channels
    shapes: dict[str, tuple[int, ...]] = {"pfn.linear.weight": (c, config.grid.in_features)}
    shapes.update({f"pfn.bn.{f}": (c,) for f in BN_FIELDS[:4]})
    shapes["pfn.bn.eps"] = (1,)
    for layer in layer_plan(config):
        shapes[f"{layer.name}.weight"] = layer.weight_shape
        shapes[f"{layer.name}.bias"] = (layer.spec.out_ch,)
        if layer.kind != "head" and not folded:
            shapes.update({f"{layer.name}.bn.{f}": (layer.spec.out_ch,) for f in BN_FIELDS[:4]})
            shapes[f"{layer.name}.bn.eps"] = (1,)
    return shapes


def validate_store(store: WeightStore, config: ModelConfig) -> None:
    folded = not any(store.has_bn(layer.name) for layer in layer_plan(config))
    for name, shape in expected_shapes(config, folded).items():
        if name not in store:
            raise ShapeError(f"missing weight tensor {name!r}")
        if store[name].shape != shape:
            raise ShapeError(f"{name}: shape {store[name].shape} does not match config {shape}")


def _bn_entries(prefix: str, channels: int, eps: float) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.bn.gamma": np.ones(channels, np.float32),
        f"{prefix}.bn.beta": np.zeros(channels, np.float32),
        f"{prefix}.bn.mean": np.zeros(channels, np.float32),
        f"{prefix}.bn.var": np.ones(channels, np.float32),
        f"{prefix}.bn.eps": np.array([eps], np.float32),
    }


def glorot_bound(shape: tuple[int, ...], transposed: bool = False) -> float:
    receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
    fan_in = shape[0 if transposed else 1] * receptive
    fan_out = shape[1 if transposed else 0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_random_weights(config: ModelConfig, seed: int = 0) -> WeightStore:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    c = config.grid.out_channels
    shape = (c, config.grid.in_features)
    bound = glorot_bound(shape)
    tensors["pfn.linear.weight"] = rng.uniform(-bound, bound, shape).astype(np.float32)
    tensors.update(_bn_entries("pfn", c, config.bn_eps))
    for layer in layer_plan(config):
        shape = layer.weight_shape
        bound = glorot_bound(shape, transposed=layer.kind == "tconv")
        tensors[f"{layer.name}.weight"] = rng.uniform(-bound, bound, shape).astype(np.float32)
        tensors[f"{layer.name}.bias"] = np.zeros(layer.spec.out_ch, np.float32)
        if layer.kind != "head":
            tensors.update(_bn_entries(layer.name, layer.spec.out_ch, config.bn_eps))
    return WeightStore(tensors)


def fold_store(store: WeightStore, config: ModelConfig) -> WeightStore:
    """Merge every backbone batch norm into its conv; the PFN batch norm is kept."""
    tensors = dict(store)
    for layer in layer_plan(config):
        if not store.has_bn(layer.name):
            continue
        w, b = nn.fold_batchnorm(
            store[f"{layer.name}.weight"], store[f"{layer.name}.bias"], *store.bn(layer.name), out_axis=layer.out_axis
        )
        tensors[f"{layer.name}.weight"] = w
        tensors[f"{layer.name}.bias"] = b
        for f in BN_FIELDS:
            del tensors[f"{layer.name}.bn.{f}"]
    return WeightStore(tensors)


def cpu_weights(store: WeightStore) -> WeightStore:
    """Only the tensors the CPU-side encoder needs."""
    return WeightStore({k: v for k, v in store.items() if k.startswith("pfn.")})


# ---------------------------------------------------------------- file format


def save_weights(store: WeightStore, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_weights(store))


def encode_weights(store: WeightStore) -> bytes:
    codes = {v: k for k, v in DTYPE_CODES.items()}
    parts = [PPW_MAGIC, struct.pack("<I", len(store))]
    for name, arr in store.items():
        raw_name = name.encode("utf-8")
        dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", codes[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class ByteReader:
    def __init__(self, data: bytes, what: str) -> None:
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"{self.what} truncated while reading {context}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, context: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), context))

    def done(self) -> bool:
        return self.pos == len(self.data)


def decode_weights(data: bytes) -> WeightStore:
    r = ByteReader(data, "weight file")
    if r.take(4, "magic") != PPW_MAGIC:
        raise FormatError("weight file: bad magic (expected PPW1)")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor #{i} header")
        name = r.take(name_len, f"tensor #{i} name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"tensor {name!r} header")
        if code not in DTYPE_CODES:
            raise FormatError(f"weight file: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I", f"tensor {name!r} dims")
        dtype = DTYPE_CODES[code]
        nbytes = math.prod(dims) * dtype.itemsize
        raw = r.take(nbytes, f"tensor {name!r} data")
        if name in tensors:
            raise FormatError(f"weight file: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if not r.done():
        raise FormatError("weight file: trailing bytes after last tensor")
    return WeightStore(tensors)


def load_weights(path: str | os.PathLike) -> WeightStore:
    return decode_weights(Path(path).read_bytes())


# ---------------------------------------------------------------- forward


@dataclass(frozen=True, eq=False)
class HeadOutput:
    cls_map: np.ndarray  # [A*K, Ho, Wo] logits
    box_map: np.ndarray  # [A*7, Ho, Wo] deltas

    def __post_init__(self) -> None:
        if self.cls_map.shape[1:] != self.box_map.shape[1:]:
            raise ShapeError("cls_map and box_map spatial dims differ")


def _apply_layer(layer: LayerDef, x: np.ndarray, store: WeightStore) -> np.ndarray:
    w = store[f"{layer.name}.weight"]
    b = store[f"{layer.name}.bias"]
    if w.shape != layer.weight_shape:
        raise ShapeError(f"{layer.name}.weight: shape {w.shape} does not match config {layer.weight_shape}")
    if layer.kind == "tconv":
        y = nn.tconv2d_f32(x, w, b, layer.spec.s)
    else:
        y = nn.conv2d_f32(x, w, b, layer.spec)
    if store.has_bn(layer.name):
        y = nn.batchnorm(y, *store.bn(layer.name))
    return nn.relu(y) if layer.relu else y


def backbone_head_forward(
    pseudo: PseudoImage | np.ndarray,
    store: WeightStore,
    config: ModelConfig,
    trace: Callable[[str, np.ndarray], None] | None = None,
) -> HeadOutput:
    """Float reference of the offloaded subgraph.

    ``trace(site, activation)`` is called for the input and every layer output.
    """
    x = pseudo.data if isinstance(pseudo, PseudoImage) else np.asarray(pseudo, dtype=np.float32)
    g = config.grid
    if x.shape != (g.out_channels, g.H, g.W):
        raise ShapeError(f"pseudo-image shape {x.shape} != {(g.out_channels, g.H, g.W)}")
    acts: dict[str, np.ndarray] = {INPUT_SITE: x}
    if trace:
        trace(INPUT_SITE, x)
    ups: list[np.ndarray] = []
    for layer in layer_plan(config):
        if layer.source == CONCAT_SITE and CONCAT_SITE not in acts:
            acts[CONCAT_SITE] = np.concatenate(ups, axis=0)
        y = _apply_layer(layer, acts[layer.source], store)
        acts[layer.name] = y
        if layer.kind == "tconv":
            ups.append(y)
        if trace:
            trace(layer.name, y)
    return HeadOutput(acts["head.cls"], acts["head.box"])
