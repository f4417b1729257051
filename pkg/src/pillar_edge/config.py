"""Grid, model and threshold configuration plus the config fingerprint.

A JSON config file may override any subset of the defaults::

    {
      "grid": {"x_min": 0.0, "x_max": 69.12, "pillar_size": 0.16, ...},
      "model": {"blocks": [[2, 4, 64], [2, 6, 128], [2, 6, 256]], ...},
      "anchor": {"size": [3.9, 1.6, 1.56], "z_center": -1.0},
      "thresholds": {"conf_thr": 0.3, "iou_thr": 0.3, "nms_iou": 0.5}
    }
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONFIG_ENV_VAR = "PILLAR_EDGE_CONFIG"

# Operating point of the reported results table: IoU 0.3, confidence 0.3.
DEFAULT_IOU_THR = 0.3
DEFAULT_CONF_THR = 0.3
DEFAULT_TARGET_HZ = 5.0


def _whole(value: float, tol: float = 1e-6) -> int | None:
    n = round(value)
    return n if abs(value - n) <= tol * max(1.0, abs(value)) else None


@dataclass(frozen=True)
class GridSpec:
    x_min: float = 0.0
    x_max: float = 69.12
    y_min: float = -39.68
    y_max: float = 39.68
    z_min: float = -3.0
    z_max: float = 1.0
    pillar_size: float = 0.16
    max_pillars: int = 12000
    max_points_per_pillar: int = 32
    in_features: int = 9
    out_channels: int = 64

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise ConfigError("grid extents must satisfy max > min on every axis")
        if self.pillar_size <= 0:
            raise ConfigError("pillar_size must be positive")
        if _whole((self.x_max - self.x_min) / self.pillar_size) is None:
            raise ConfigError("x extent is not a whole number of pillars")
        if _whole((self.y_max - self.y_min) / self.pillar_size) is None:
            raise ConfigError("y extent is not a whole number of pillars")
        if min(self.max_pillars, self.max_points_per_pillar, self.out_channels) <= 0:
            raise ConfigError("max_pillars, max_points_per_pillar and out_channels must be > 0")
        if self.in_features != 9:
            raise ConfigError("in_features is fixed at 9")

    @property
    def W(self) -> int:
        return int(_whole((self.x_max - self.x_min) / self.pillar_size))

    @property
    def H(self) -> int:
        return int(_whole((self.y_max - self.y_min) / self.pillar_size))


@dataclass(frozen=True)
class AnchorSpec:
    size: tuple[float, float, float] = (3.9, 1.6, 1.56)
    z_center: float = -1.0
    yaws: tuple[float, ...] = (0.0, math.pi / 2)


@dataclass(frozen=True)
class ModelConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    blocks: tuple[tuple[int, int, int], ...] = ((2, 4, 64), (2, 6, 128), (2, 6, 256))
    up_strides: tuple[int, ...] = (1, 2, 4)
    up_channels: int = 128
    n_anchors_per_cell: int = 2
    n_classes: int = 1
    box_code_size: int = 7
    bn_eps: float = 1e-3
    anchor: AnchorSpec = field(default_factory=AnchorSpec)

    def __post_init__(self) -> None:
        if len(self.blocks) != len(self.up_strides) or not self.blocks:
            raise ConfigError("blocks and up_strides must be non-empty and of equal length")
        for stride, n_layers, channels in self.blocks:
            if stride < 1 or n_layers < 1 or channels < 1:
                raise ConfigError(f"invalid block {(stride, n_layers, channels)}")
        if any(u < 1 for u in self.up_strides):
            raise ConfigError("up strides must be >= 1")
        if self.box_code_size != 7:
            raise ConfigError("box_code_size is fixed at 7")
        if self.n_classes != 1:
            raise ConfigError("only single-class heads are supported")
        if len(self.anchor.yaws) != self.n_anchors_per_cell:
            raise ConfigError("anchor yaws must match n_anchors_per_cell")
        total = math.prod(s for s, _, _ in self.blocks)
        if self.grid.H % total or self.grid.W % total:
            raise ConfigError("product of block strides must divide H and W")
        self.output_size  # validates branch resolutions

    @property
    def output_size(self) -> tuple[int, int]:
        """Common (Ho, Wo) of the upsampled branches."""
        sizes = set()
        h, w = self.grid.H, self.grid.W
        for (stride, _, _), up in zip(self.blocks, self.up_strides):
            h, w = h // stride, w // stride
            sizes.add((h * up, w * up))
        if len(sizes) != 1:
            raise ConfigError(f"upsampled branches disagree on resolution: {sorted(sizes)}")
        return sizes.pop()

    @property
    def concat_channels(self) -> int:
        return self.up_channels * len(self.blocks)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()


@dataclass(frozen=True)
class Thresholds:
    conf_thr: float = DEFAULT_CONF_THR
    iou_thr: float = DEFAULT_IOU_THR
    score_thr: float = 0.1  # floor for emitted detections; eval applies conf_thr
    nms_iou: float = 0.5
    pre_nms_top_k: int = 1000

    def __post_init__(self) -> None:
        for name in ("conf_thr", "iou_thr", "score_thr", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.pre_nms_top_k < 1:
            raise ConfigError("pre_nms_top_k must be >= 1")


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(cls, data: dict[str, Any] | None, base):
    if not data:
        return base
    known = set(base.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return replace(base, **{k: _tupled(v) for k, v in data.items()})


def config_from_dict(data: dict[str, Any]) -> tuple[ModelConfig, Thresholds]:
    unknown = set(data) - {"grid", "model", "anchor", "thresholds"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        grid = _build(GridSpec, data.get("grid"), GridSpec())
        anchor = _build(AnchorSpec, data.get("anchor"), AnchorSpec())
        model = dict(data.get("model") or {})
        model["grid"] = grid
        model["anchor"] = anchor
        config = _build(ModelConfig, model, ModelConfig(grid=grid, anchor=anchor))
        thresholds = _build(Thresholds, data.get("thresholds"), Thresholds())
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config, thresholds


def config_to_dict(config: ModelConfig, thresholds: Thresholds | None = None) -> dict[str, Any]:
    d = config.to_dict()
    out: dict[str, Any] = {"grid": d.pop("grid"), "anchor": d.pop("anchor"), "model": d}
    if thresholds is not None:
        out["thresholds"] = asdict(thresholds)
    return out


def load_config(path: str | os.PathLike | None = None) -> tuple[ModelConfig, Thresholds]:
    """Load a config file; falls back to ``$PILLAR_EDGE_CONFIG`` then to defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return ModelConfig(), Thresholds()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return config_from_dict(data)
