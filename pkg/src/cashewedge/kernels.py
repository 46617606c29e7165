"""Neural-network layer primitives in float32 and int8 arithmetic.

Float kernels accumulate in float32.  Int8 kernels accumulate
(q_in - zp_in) * (q_w - zp_w) in 32-bit integers, add an int32 bias held at
scale in_scale * w_scale, then requantize with a Q31 fixed-point multiplier
representing in_scale * w_scale / out_scale.  relu6 is fused as a clamp; in
int8 the clamp bounds are the quantized codes of 0.0 and 6.0, which makes the
int8 activation bit-identical to float relu6 followed by quantization.

The hot loops are compiled with numba; int8 weights are widened to int16 once
per tensor (cached) so the inner loop vectorizes.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ContractError, DomainError
from .tensors import (
    INT8_MAX,
    INT8_MIN,
    FixedPointMultiplier,
    QuantParams,
    Tensor,
    round_half_away,
    to_fixed_point,
)

VALID_STRIDES = (1, 2)
VALID_PADDINGS = ("same", "valid")
VALID_ACTIVATIONS = ("none", "relu6")


@dataclass(frozen=True)
class ConvAttrs:
    stride: int = 1
    padding: str = "same"
    activation: str = "none"

    def __post_init__(self):
        if self.stride not in VALID_STRIDES:
            raise ContractError(f"stride must be one of {VALID_STRIDES}")
        if self.padding not in VALID_PADDINGS:
            raise ContractError(f"padding must be one of {VALID_PADDINGS}")
        if self.activation not in VALID_ACTIVATIONS:
            raise ContractError(f"activation must be one of {VALID_ACTIVATIONS}")


def same_padding(in_size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding; the odd cell goes on the bottom/right."""
    out = -(-in_size // stride)
    total = max((out - 1) * stride + kernel - in_size, 0)
    return total // 2, total - total // 2


def conv_output_hw(h: int, w: int, kh: int, kw: int, attrs: ConvAttrs) -> tuple[int, int]:
    if attrs.padding == "same":
        return -(-h // attrs.stride), -(-w // attrs.stride)
    oh = (h - kh) // attrs.stride + 1
    ow = (w - kw) // attrs.stride + 1
    if oh < 1 or ow < 1:
        raise ContractError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
    return oh, ow


# ---------------------------------------------------------------------------
# numba cores (single image, HWC)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv2d_f32(x, w, b, stride, pad_top, pad_left, relu6_on, out):
    H, W, Cin = x.shape
    Kh, Kw, _, Cout = w.shape
    OH, OW, _ = out.shape
    acc = np.empty(Cout, np.float32)
    for oh in range(OH):
        iy0 = oh * stride - pad_top
        for ow in range(OW):
            ix0 = ow * stride - pad_left
            for co in range(Cout):
                acc[co] = b[co]
            for kh in range(Kh):
                iy = iy0 + kh
                if iy < 0 or iy >= H:
                    continue
                for kw in range(Kw):
                    ix = ix0 + kw
                    if ix < 0 or ix >= W:
                        continue
                    for ci in range(Cin):
                        xv = x[iy, ix, ci]
                        for co in range(Cout):
                            acc[co] += xv * w[kh, kw, ci, co]
            for co in range(Cout):
                v = acc[co]
                if relu6_on:
                    if v < np.float32(0.0):
                        v = np.float32(0.0)
                    elif v > np.float32(6.0):
                        v = np.float32(6.0)
                out[oh, ow, co] = v


@njit(cache=True)
def _conv2d_i8(x, w16, b, stride, pad_top, pad_left, zp_in,
               mant, shift, zp_out, act_min, act_max, out):
    # w16 already has the weight zero point subtracted
    H, W, Cin = x.shape
    Kh, Kw, _, Cout = w16.shape
    OH, OW, _ = out.shape
    acc = np.empty(Cout, np.int32)
    for oh in range(OH):
        iy0 = oh * stride - pad_top
        for ow in range(OW):
            ix0 = ow * stride - pad_left
            for co in range(Cout):
                acc[co] = b[co]
            for kh in range(Kh):
                iy = iy0 + kh
                if iy < 0 or iy >= H:
                    continue
                for kw in range(Kw):
                    ix = ix0 + kw
                    if ix < 0 or ix >= W:
                        continue
                    for ci in range(Cin):
                        xv = np.int32(x[iy, ix, ci]) - zp_in
                        for co in range(Cout):
                            acc[co] += xv * np.int32(w16[kh, kw, ci, co])
            if shift > 0:
                off = np.int64(1) << (shift - np.int64(1))
                for co in range(Cout):
                    v = np.int64(acc[co]) * mant
                    s = v >> np.int64(63)  # sign mask: round half away, branch-free
                    r = ((((v ^ s) - s + off) >> shift) ^ s) - s + zp_out
                    r = min(max(r, act_min), act_max)
                    out[oh, ow, co] = np.int8(r)
            else:
                for co in range(Cout):
                    r = (np.int64(acc[co]) * mant) << (-shift)
                    r = min(max(r + zp_out, act_min), act_max)
                    out[oh, ow, co] = np.int8(r)


@njit(cache=True)
def _dwconv_f32(x, w, b, stride, pad_top, pad_left, relu6_on, out):
    H, W, C = x.shape
    Kh, Kw, _, _ = w.shape
    OH, OW, _ = out.shape
    acc = np.empty(C, np.float32)
    for oh in range(OH):
        iy0 = oh * stride - pad_top
        for ow in range(OW):
            ix0 = ow * stride - pad_left
            for c in range(C):
                acc[c] = b[c]
            for kh in range(Kh):
                iy = iy0 + kh
                if iy < 0 or iy >= H:
                    continue
                for kw in range(Kw):
                    ix = ix0 + kw
                    if ix < 0 or ix >= W:
                        continue
                    for c in range(C):
                        acc[c] += x[iy, ix, c] * w[kh, kw, 0, c]
            for c in range(C):
                v = acc[c]
                if relu6_on:
                    if v < np.float32(0.0):
                        v = np.float32(0.0)
                    elif v > np.float32(6.0):
                        v = np.float32(6.0)
                out[oh, ow, c] = v


@njit(cache=True)
def _dwconv_i8(x, w16, b, stride, pad_top, pad_left, zp_in,
               mant, shift, zp_out, act_min, act_max, out):
    # w16 already has the weight zero point subtracted
    H, W, C = x.shape
    Kh, Kw, _, _ = w16.shape
    OH, OW, _ = out.shape
    acc = np.empty(C, np.int32)
    for oh in range(OH):
        iy0 = oh * stride - pad_top
        for ow in range(OW):
            ix0 = ow * stride - pad_left
            for c in range(C):
                acc[c] = b[c]
            for kh in range(Kh):
                iy = iy0 + kh
                if iy < 0 or iy >= H:
                    continue
                for kw in range(Kw):
                    ix = ix0 + kw
                    if ix < 0 or ix >= W:
                        continue
                    for c in range(C):
                        acc[c] += (np.int32(x[iy, ix, c]) - zp_in) * np.int32(w16[kh, kw, 0, c])
            if shift > 0:
                off = np.int64(1) << (shift - np.int64(1))
                for c in range(C):
                    v = np.int64(acc[c]) * mant
                    s = v >> np.int64(63)
                    r = ((((v ^ s) - s + off) >> shift) ^ s) - s + zp_out
                    r = min(max(r, act_min), act_max)
                    out[oh, ow, c] = np.int8(r)
            else:
                for c in range(C):
                    r = (np.int64(acc[c]) * mant) << (-shift)
                    r = min(max(r + zp_out, act_min), act_max)
                    out[oh, ow, c] = np.int8(r)


@njit(cache=True)
def _rshift_round(v, shift):
    # round-half-away arithmetic shift; negative shift shifts left exactly
    if shift <= 0:
        return v << (-shift)
    off = np.int64(1) << (shift - np.int64(1))
    s = v >> np.int64(63)
    return ((((v ^ s) - s + off) >> shift) ^ s) - s


@njit(cache=True)
def _add_i8(a, b, zp_a, zp_b, mant_a, shift_a, mant_b, shift_b, zp_out, out):
    # two-multiplier rescale into the output scale with 20 bits of headroom
    for i in range(a.size):
        ta = _rshift_round((np.int64(a[i]) - zp_a) * mant_a, shift_a)
        tb = _rshift_round((np.int64(b[i]) - zp_b) * mant_b, shift_b)
        r = _rshift_round(ta + tb, np.int64(20)) + zp_out
        out[i] = np.int8(min(max(r, np.int64(-128)), np.int64(127)))


@njit(cache=True)
def _quantize_i8(x, scale, zp, out):
    # round half away from zero, matching tensors.quantize_array bit for bit
    for i in range(x.size):
        v = np.float64(x[i]) / scale
        if v >= 0.0:
            r = np.trunc(v + 0.5)
        else:
            r = np.trunc(v - 0.5)
        q = np.int64(r) + zp
        if q < -128:
            q = -128
        elif q > 127:
            q = 127
        out[i] = np.int8(q)


def quantize_input(x: np.ndarray, params: QuantParams, out: np.ndarray) -> None:
    """Quantize a float32 activation into a preallocated int8 buffer."""
    _quantize_i8(np.ascontiguousarray(x).reshape(-1), np.float64(params.scale),
                 np.int64(params.zero_point), out.reshape(-1))


# Widened, zero-point-removed int16 weight copies keyed by Tensor identity,
# so repeated execution does not re-prepare weights.
_w16_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _widened_weights(w: Tensor) -> np.ndarray:
    w16 = _w16_cache.get(w)
    if w16 is None:
        w16 = np.ascontiguousarray(
            w.data.astype(np.int16) - np.int16(w.qparams.zero_point))
        _w16_cache[w] = w16
    return w16


def _int8_clamp_codes(activation: str, p: QuantParams) -> tuple[int, int]:
    if activation == "none":
        return INT8_MIN, INT8_MAX
    lo = p.zero_point
    hi = int(round_half_away(6.0 / p.scale)) + p.zero_point
    return lo, min(max(lo, hi), INT8_MAX)


def _check_conv_inputs(x: Tensor, w: Tensor, bias, out_params, depthwise: bool):
    if x.data.ndim != 4:
        raise ContractError(f"input must be NHWC, got {x.data.ndim} dims")
    if w.data.ndim != 4:
        raise ContractError(f"weights must be 4-D, got {w.data.ndim} dims")
    cin, cout = w.shape[2], w.shape[3]
    if depthwise:
        if cin != 1:
            raise ContractError("depthwise weights must be (Kh, Kw, 1, C)")
        if cout != x.shape[3]:
            raise ContractError(
                f"depthwise channel count {cout} != input channels {x.shape[3]}")
    elif cin != x.shape[3]:
        raise ContractError(f"weight Cin {cin} != input channels {x.shape[3]}")
    if x.is_quantized != w.is_quantized:
        raise ContractError("input and weights must share numeric mode")
    if x.is_quantized:
        if out_params is None:
            raise ContractError("int8 path requires output QuantParams")
        if bias is not None and bias.dtype != np.int32:
            raise ContractError("int8 path requires int32 bias")
    elif bias is not None and bias.dtype != np.float32:
        raise ContractError("float path requires float32 bias")
    if bias is not None and bias.shape != (cout if not depthwise else w.shape[3],):
        raise ContractError("bias length must equal output channel count")


def _run_conv(x: Tensor, w: Tensor, bias, attrs: ConvAttrs, out_params,
              multiplier, out, depthwise: bool) -> Tensor:
    n, h, wd, _ = x.shape
    kh, kw = w.shape[0], w.shape[1]
    cout = w.shape[3]
    oh, ow = conv_output_hw(h, wd, kh, kw, attrs)
    if attrs.padding == "same":
        pt, _ = same_padding(h, kh, attrs.stride)
        pl, _ = same_padding(wd, kw, attrs.stride)
    else:
        pt = pl = 0

    if x.is_quantized:
        if out is None:
            out = np.empty((n, oh, ow, cout), np.int8)
        b = bias if bias is not None else np.zeros(cout, np.int32)
        if multiplier is None:
            multiplier = to_fixed_point(
                x.qparams.scale * w.qparams.scale / out_params.scale)
        act_min, act_max = _int8_clamp_codes(attrs.activation, out_params)
        w16 = _widened_weights(w)
        core = _dwconv_i8 if depthwise else _conv2d_i8
        for i in range(n):
            core(x.data[i], w16, b, attrs.stride, pt, pl,
                 np.int32(x.qparams.zero_point),
                 np.int64(multiplier.mantissa), np.int64(31 - multiplier.exponent),
                 np.int64(out_params.zero_point), np.int64(act_min),
                 np.int64(act_max), out[i])
        return Tensor(out, out_params)

    if out is None:
        out = np.empty((n, oh, ow, cout), np.float32)
    b = bias if bias is not None else np.zeros(cout, np.float32)
    core = _dwconv_f32 if depthwise else _conv2d_f32
    for i in range(n):
        core(x.data[i], w.data, b, attrs.stride, pt, pl,
             attrs.activation == "relu6", out[i])
    return Tensor(out)


def conv2d(x: Tensor, w: Tensor, bias: np.ndarray | None, attrs: ConvAttrs,
           out_params: QuantParams | None = None,
           multiplier: FixedPointMultiplier | None = None,
           out: np.ndarray | None = None) -> Tensor:
    """2-D cross-correlation over an NHWC tensor with (Kh, Kw, Cin, Cout) weights."""
    _check_conv_inputs(x, w, bias, out_params, depthwise=False)
    return _run_conv(x, w, bias, attrs, out_params, multiplier, out, depthwise=False)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: np.ndarray | None, attrs: ConvAttrs,
                     out_params: QuantParams | None = None,
                     multiplier: FixedPointMultiplier | None = None,
                     out: np.ndarray | None = None) -> Tensor:
    """Per-channel convolution with (Kh, Kw, 1, C) weights; no channel mixing."""
    _check_conv_inputs(x, w, bias, out_params, depthwise=True)
    return _run_conv(x, w, bias, attrs, out_params, multiplier, out, depthwise=True)


def relu6(x: Tensor) -> Tensor:
    """Elementwise min(max(x, 0), 6) on a float tensor."""
    if x.is_quantized:
        raise ContractError("relu6 operates on float tensors; int8 fuses the clamp")
    return Tensor(np.clip(x.data, 0.0, 6.0).astype(np.float32))


def global_avg_pool(x: Tensor, out: np.ndarray | None = None) -> Tensor:
    """Spatial mean per channel: NHWC -> N11C.

    The int8 path sums in 64-bit, divides with round-half-away, and keeps the
    input QuantParams.
    """
    if x.data.ndim != 4:
        raise ContractError("global_avg_pool expects NHWC input")
    n, h, w, c = x.shape
    if x.is_quantized:
        total = x.data.astype(np.int64).sum(axis=(1, 2))
        count = h * w
        mag = (2 * np.abs(total) + count) // (2 * count)
        mean = np.where(total >= 0, mag, -mag).astype(np.int8).reshape(n, 1, 1, c)
        if out is not None:
            out[...] = mean
            mean = out
        return Tensor(mean, x.qparams)
    mean = x.data.mean(axis=(1, 2), dtype=np.float32).reshape(n, 1, 1, c)
    if out is not None:
        out[...] = mean
        mean = out
    return Tensor(mean)


def fully_connected(x: Tensor, w: Tensor, bias: np.ndarray | None,
                    activation: str = "none",
                    out_params: QuantParams | None = None,
                    multiplier: FixedPointMultiplier | None = None,
                    out: np.ndarray | None = None) -> Tensor:
    """Affine map of a 1-D tensor by an (In, Out) weight matrix, then activation."""
    if activation not in VALID_ACTIVATIONS:
        raise ContractError(f"activation must be one of {VALID_ACTIVATIONS}")
    if x.data.ndim != 1:
        raise ContractError("fully_connected expects a 1-D input tensor")
    if w.data.ndim != 2:
        raise ContractError("fully_connected expects a 2-D weight matrix")
    if w.shape[0] != x.shape[0]:
        raise ContractError(f"weight rows {w.shape[0]} != input length {x.shape[0]}")
    x4 = Tensor(x.data.reshape(1, 1, 1, -1), x.qparams)
    w4 = Tensor(w.data.reshape(1, 1, w.shape[0], w.shape[1]), w.qparams)
    attrs = ConvAttrs(stride=1, padding="valid", activation=activation)
    out4 = None if out is None else out.reshape(1, 1, 1, -1)
    r = conv2d(x4, w4, bias, attrs, out_params, multiplier, out4)
    return Tensor(r.data.reshape(-1), r.qparams)


def softmax(logits: Tensor) -> Tensor:
    """Max-shifted exponential normalization of a float logit vector."""
    if logits.is_quantized:
        raise ContractError("softmax expects float logits; dequantize first")
    if logits.data.ndim != 1:
        raise ContractError("softmax expects a 1-D tensor")
    z = logits.data.astype(np.float64)
    if not np.isfinite(z).all():
        raise DomainError("softmax input must be finite")
    e = np.exp(z - z.max())
    return Tensor((e / e.sum()).astype(np.float32))


def dropout_inference(x: Tensor, rate: float) -> Tensor:
    """Dropout is a no-op at inference; rate is validated against [0, 1)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    return x


def residual_add(a: Tensor, b: Tensor, out_params: QuantParams | None = None,
                 out: np.ndarray | None = None) -> Tensor:
    """Elementwise skip-connection add.

    int8 inputs are rescaled into the output scale with Q31 multipliers and 20
    bits of headroom, keeping the result exact-integer and platform-stable.
    """
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.is_quantized != b.is_quantized:
        raise ContractError("operands must share numeric mode")
    if not a.is_quantized:
        r = a.data + b.data
        if out is not None:
            out[...] = r
            r = out
        return Tensor(r.astype(np.float32) if r.dtype != np.float32 else r)
    if out_params is None:
        raise ContractError("int8 residual_add requires output QuantParams")

    headroom = 20
    ma = to_fixed_point(a.qparams.scale / out_params.scale)
    mb = to_fixed_point(b.qparams.scale / out_params.scale)
    if out is None:
        out = np.empty(a.shape, np.int8)
    _add_i8(np.ascontiguousarray(a.data).reshape(-1),
            np.ascontiguousarray(b.data).reshape(-1),
            np.int64(a.qparams.zero_point), np.int64(b.qparams.zero_point),
            np.int64(ma.mantissa), np.int64(31 - ma.exponent - headroom),
            np.int64(mb.mantissa), np.int64(31 - mb.exponent - headroom),
            np.int64(out_params.zero_point), out.reshape(-1))
    return Tensor(out, out_params)
