"""Dense float32 and int8 kernels for the backbone and head.

Tensors are plain numpy arrays in CHW layout. Convolutions are
cross-correlations with zero padding, lowered to a single matrix product
so each output element has a fixed reduction order.

The int8 kernels use symmetric quantization (zero point 0). Integer
accumulation is carried out exactly in float64: every partial sum is an
integer bounded by ``127 * 127 * fan_in + |bias|``, far below 2**53.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

QMAX = 127
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    k: int
    s: int = 1
    p: int = 0

    def __post_init__(self) -> None:
        if min(self.in_ch, self.out_ch, self.k, self.s) < 1 or self.p < 0:
            raise ShapeError(f"invalid conv spec {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.p - self.k) // self.s + 1
        wo = (w + 2 * self.p - self.k) // self.s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


@dataclass(frozen=True)
class QuantParams:
    """Symmetric quantization parameters; ``scale`` is a scalar or per-channel array."""

    scale: float | np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scale, dtype=np.float64)
        if not (np.isfinite(s).all() and (s > 0).all()):
            raise ValueError("quantization scale must be positive and finite")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec | None) -> ConvSpec:
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"expected x [Cin,H,W] and w [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    if spec is None:
        spec = ConvSpec(cin, cout, kh)
    if x.shape[0] != cin or (spec.in_ch, spec.out_ch, spec.k) != (cin, cout, kh):
        raise ShapeError(f"shape mismatch: x {x.shape}, w {w.shape}, spec {spec}")
    return spec


def _im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Patches as [Ho*Wo, Cin*k*k] (a copy, row-major over output positions)."""
    if spec.p:
        x = np.pad(x, ((0, 0), (spec.p, spec.p), (spec.p, spec.p)))
    ho, wo = spec.out_size(x.shape[1] - 2 * spec.p, x.shape[2] - 2 * spec.p)
    win = sliding_window_view(x, (spec.k, spec.k), axis=(1, 2))[:, :: spec.s, :: spec.s][:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, -1)
    return cols, ho, wo


def conv2d_f32(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, spec: ConvSpec | None = None) -> np.ndarray:
    """2D cross-correlation: x [Cin,H,W], w [Cout,Cin,k,k] -> [Cout,H',W']."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    spec = _check_conv(x, w, spec)
    cols, ho, wo = _im2col(x, spec)
    out = cols @ w.reshape(spec.out_ch, -1).T
    if b is not None:
        b = np.asarray(b, dtype=np.float32)
        if b.shape != (spec.out_ch,):
            raise ShapeError(f"bias shape {b.shape} != ({spec.out_ch},)")
        out += b
    return np.ascontiguousarray(out.T.reshape(spec.out_ch, ho, wo))


def _check_tconv(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[int, int, int]:
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"expected x [Cin,H,W] and w [Cin,Cout,u,u], got {x.shape} and {w.shape}")
    cin, cout, kh, kw = w.shape
    if x.shape[0] != cin:
        raise ShapeError(f"input channels {x.shape[0]} != weight in-channels {cin}")
    if not (kh == kw == stride) or stride < 1:
        raise ShapeError(f"transposed conv needs kernel == stride, got kernel {kh}x{kw}, stride {stride}")
    return cin, cout, stride


def _tconv_matmul(x: np.ndarray, w: np.ndarray, stride: int, dtype) -> np.ndarray:
    cin, cout, u = _check_tconv(x, w, stride)
    _, h, wd = x.shape
    flat = x.reshape(cin, h * wd).T.astype(dtype) @ w.reshape(cin, cout * u * u).astype(dtype)
    out = flat.reshape(h, wd, cout, u, u).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(out.reshape(cout, h * u, wd * u))


def tconv2d_f32(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int) -> np.ndarray:
    """Transposed conv with kernel == stride and no padding: exact stride-x upsampling.

    ``w`` is laid out [Cin, Cout, u, u]; output is [Cout, u*H, u*W].
    """
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    out = _tconv_matmul(x, w, stride, np.float32)
    if b is not None:
        out += np.asarray(b, dtype=np.float32)[:, None, None]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def batchnorm(x: np.ndarray, gamma, beta, mean, var, eps: float, axis: int = 0) -> np.ndarray:
    shape = [1] * x.ndim
    shape[axis] = -1
    g = (np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)).reshape(shape)
    return ((x - np.asarray(mean).reshape(shape)) * g + np.asarray(beta).reshape(shape)).astype(x.dtype)


def fold_batchnorm(w, b, gamma, beta, mean, var, eps: float, out_axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fuse inference-mode batch norm into the preceding conv.

    ``out_axis`` selects the output-channel axis of ``w`` (1 for transposed convs).
    """
    denom = np.asarray(var, dtype=np.float64) + eps
    if (denom <= 0).any():
        raise ValueError("batch norm variance + eps must be positive")
    g = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[out_axis]) if b is None else np.asarray(b, dtype=np.float64)
    shape = [1] * w.ndim
    shape[out_axis] = -1
    w_f = w * g.reshape(shape)
    b_f = (b - np.asarray(mean, dtype=np.float64)) * g + np.asarray(beta, dtype=np.float64)
    return w_f.astype(np.float32), b_f.astype(np.float32)


def quantize(x: np.ndarray, q: QuantParams | float, axis: int | None = None) -> np.ndarray:
    """clamp(round(x / scale), -127, 127) as int8; per-channel if ``axis`` is given."""
    scale = np.asarray(q.scale if isinstance(q, QuantParams) else q, dtype=np.float64)
    if not (scale > 0).all():
        raise ValueError("scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    if axis is not None:
        shape = [1] * x.ndim
        shape[axis] = -1
        scale = scale.reshape(shape)
    return np.clip(round_half_away(x / scale), -QMAX, QMAX).astype(np.int8)


def dequantize(xq: np.ndarray, q: QuantParams | float, axis: int | None = None) -> np.ndarray:
    scale = np.asarray(q.scale if isinstance(q, QuantParams) else q, dtype=np.float64)
    if axis is not None:
        shape = [1] * xq.ndim
        shape[axis] = -1
        scale = scale.reshape(shape)
    return (xq.astype(np.float64) * scale).astype(np.float32)


def quantize_bias(b: np.ndarray, x_scale: float, w_scales: np.ndarray) -> np.ndarray:
    acc_scale = x_scale * np.asarray(w_scales, dtype=np.float64)
    q = round_half_away(np.asarray(b, dtype=np.float64) / acc_scale)
    return np.clip(q, -INT32_MAX, INT32_MAX).astype(np.int32)


def requantize(acc: np.ndarray, multiplier: np.ndarray, relu_out: bool) -> np.ndarray:
    """Scale int32 accumulators per output channel (axis 0) back to int8."""
    out = round_half_away(acc * np.asarray(multiplier, dtype=np.float64)[:, None, None])
    lo = 0 if relu_out else -QMAX
    return np.clip(out, lo, QMAX).astype(np.int8)


def check_accumulator_bound(fan_in: int) -> None:
    if fan_in >= INT32_MAX // (QMAX * QMAX):
        raise OverflowError(f"fan_in {fan_in} could overflow int32 accumulation")


def conv2d_i8_acc(xq: np.ndarray, wq: np.ndarray, bias_i32: np.ndarray | None, spec: ConvSpec | None = None) -> np.ndarray:
    """Raw int32 accumulators of an int8 convolution, as int64."""
    spec = _check_conv(xq, wq, spec)
    check_accumulator_bound(spec.in_ch * spec.k * spec.k)
    cols, ho, wo = _im2col(xq, spec)
    acc = cols.astype(np.float64) @ wq.reshape(spec.out_ch, -1).T.astype(np.float64)
    acc = acc.T.reshape(spec.out_ch, ho, wo)
    if bias_i32 is not None:
        acc += np.asarray(bias_i32, dtype=np.float64)[:, None, None]
    return acc.astype(np.int64)


def conv2d_i8(
    xq: np.ndarray,
    wq: np.ndarray,
    bias_i32: np.ndarray | None,
    x_scale: float,
    w_scales: np.ndarray,
    out_scale: float,
    spec: ConvSpec | None = None,
    relu_out: bool = False,
) -> np.ndarray:
    acc = conv2d_i8_acc(xq, wq, bias_i32, spec)
    m = x_scale * np.asarray(w_scales, dtype=np.float64) / out_scale
    return requantize(acc, m, relu_out)


def tconv2d_i8(
    xq: np.ndarray,
    wq: np.ndarray,
    bias_i32: np.ndarray | None,
    x_scale: float,
    w_scales: np.ndarray,
    out_scale: float,
    stride: int,
    relu_out: bool = False,
) -> np.ndarray:
    check_accumulator_bound(wq.shape[0])
    acc = _tconv_matmul(xq, wq, stride, np.float64)
    if bias_i32 is not None:
        acc += np.asarray(bias_i32, dtype=np.float64)[:, None, None]
    m = x_scale * np.asarray(w_scales, dtype=np.float64) / out_scale
    return requantize(acc.astype(np.int64), m, relu_out)
