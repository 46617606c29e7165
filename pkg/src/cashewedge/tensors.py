"""Quantized tensors and the affine int8 arithmetic the rest of the toolkit builds on.

A real value x maps to an int8 code q via

    q = clamp(round(x / scale) + zero_point, -128, 127)
    x ~ scale * (q - zero_point)

with a single (scale, zero_point) pair per tensor.  Rounding is always
half-away-from-zero so integer results are bit-reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError

INT8_MIN = -128
INT8_MAX = 127


def round_half_away(x):
    """Round to nearest integer with ties away from zero (ndarray or scalar)."""
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine quantization parameters.

    scale is the real-unit width of one quantized step; zero_point is the
    int8 code that represents 0.0.  Any zero_point inside the int8 range
    keeps 0.0 representable, which the constructor enforces.
    """

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise DomainError(f"scale must be finite and positive, got {self.scale}")
        if not (INT8_MIN <= self.zero_point <= INT8_MAX):
            raise DomainError(f"zero_point {self.zero_point} outside int8 range")
        lo = self.scale * (INT8_MIN - self.zero_point)
        hi = self.scale * (INT8_MAX - self.zero_point)
        if not (lo <= 0.0 <= hi):
            raise DomainError("quantized range does not contain 0.0")

    @property
    def range(self) -> tuple[float, float]:
        """Real interval representable without saturation."""
        return (self.scale * (INT8_MIN - self.zero_point),
                self.scale * (INT8_MAX - self.zero_point))


@dataclass(frozen=True, eq=False)
class Tensor:
    """A shaped numeric array: float32, or int8 with quantization params.

    Activations are NHWC (or HWC for a single image); conv weights are
    (Kh, Kw, Cin, Cout).  Identity-compared (ndarray payloads), so instances
    can key caches.
    """

    data: np.ndarray
    qparams: QuantParams | None = None

    def __post_init__(self):
        if self.data.size == 0:
            raise ContractError("tensor must have at least one element")
        if self.data.dtype == np.float32:
            if self.qparams is not None:
                raise ContractError("float32 tensor must not carry QuantParams")
        elif self.data.dtype == np.int8:
            if self.qparams is None:
                raise ContractError("int8 tensor must carry QuantParams")
        else:
            raise ContractError(f"unsupported tensor dtype {self.data.dtype}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_quantized(self) -> bool:
        return self.qparams is not None


def compute_quant_params(observed_min: float, observed_max: float,
                         mode: str = "asymmetric") -> QuantParams:
    """Derive (scale, zero_point) from an observed real value range.

    asymmetric: the range is first widened to include 0, then mapped onto
    all 256 codes.  symmetric: scale covers max(|min|, |max|) with
    zero_point pinned to 0 (used for weights).  A degenerate all-zero range
    yields scale=1, zero_point=0 so downstream math stays total.
    """
    if not (math.isfinite(observed_min) and math.isfinite(observed_max)):
        raise DomainError("observed range must be finite")
    if observed_min > observed_max:
        raise DomainError(f"min {observed_min} exceeds max {observed_max}")
    if mode not in ("asymmetric", "symmetric"):
        raise DomainError(f"unknown quantization mode {mode!r}")

    if mode == "symmetric":
        bound = max(abs(observed_min), abs(observed_max))
        if bound == 0.0:
            return QuantParams(1.0, 0)
        return QuantParams(bound / 127.0, 0)

    lo = min(observed_min, 0.0)
    hi = max(observed_max, 0.0)
    if lo == 0.0 and hi == 0.0:
        return QuantParams(1.0, 0)
    scale = (hi - lo) / 255.0
    zp = int(round_half_away(INT8_MIN - lo / scale))
    zp = max(INT8_MIN, min(INT8_MAX, zp))
    return QuantParams(scale, zp)


def quantize(x: Tensor, params: QuantParams) -> Tensor:
    """Quantize a float32 tensor to int8 under params (saturating)."""
    if x.is_quantized:
        raise ContractError("input tensor is already quantized")
    bad = ~np.isfinite(x.data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"non-finite value at index {idx}")
    q = round_half_away(x.data.astype(np.float64) / params.scale) + params.zero_point
    q = np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)
    return Tensor(q, params)


def dequantize(q: Tensor) -> Tensor:
    """Map an int8 tensor back to real values: scale * (q - zero_point)."""
    if not q.is_quantized:
        raise ContractError("dequantize requires an int8 tensor with QuantParams")
    p = q.qparams
    x = (q.data.astype(np.int32) - p.zero_point).astype(np.float32) * np.float32(p.scale)
    return Tensor(x.astype(np.float32))


def quantize_array(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Array-level quantize used by internal hot paths (same math as quantize)."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def dequantize_array(q: np.ndarray, params: QuantParams) -> np.ndarray:
    return ((q.astype(np.int32) - params.zero_point).astype(np.float32)
            * np.float32(params.scale))


@dataclass(frozen=True)
class FixedPointMultiplier:
    """A positive real multiplier as mantissa * 2**(exponent - 31).

    mantissa is a Q31 integer in [2**30, 2**31); the representation error
    is at most one part in 2**30 of the requested multiplier.
    """

    mantissa: int
    exponent: int

    def __post_init__(self):
        if not (1 << 30) <= self.mantissa < (1 << 31):
            raise DomainError(f"mantissa {self.mantissa} outside [2^30, 2^31)")

    @property
    def value(self) -> float:
        return self.mantissa * 2.0 ** (self.exponent - 31)


def to_fixed_point(multiplier: float) -> FixedPointMultiplier:
    """Express a positive real multiplier in Q31 mantissa/exponent form."""
    if not (math.isfinite(multiplier) and multiplier > 0.0):
        raise DomainError(f"multiplier must be finite and positive, got {multiplier}")
    frac, exp = math.frexp(multiplier)  # multiplier = frac * 2**exp, frac in [0.5, 1)
    mantissa = round(frac * (1 << 31))
    if mantissa == (1 << 31):  # frac rounded up to 1.0
        mantissa = 1 << 30
        exp += 1
    return FixedPointMultiplier(mantissa, exp)


def rounding_shift(value: int, shift: int) -> int:
    """Arithmetic right shift rounding to nearest, ties away from zero.

    Negative shift amounts shift left exactly.  Exact integer arithmetic.
    """
    if shift <= 0:
        return value << (-shift)
    offset = 1 << (shift - 1)
    if value >= 0:
        return (value + offset) >> shift
    return -((-value + offset) >> shift)


def requantize(acc: int, multiplier: FixedPointMultiplier, out_zero_point: int) -> int:
    """Scale a 32-bit accumulator into an int8 code.

    result = clamp(rounding_shift(acc * mantissa, 31 - exponent) + zp).
    All intermediates are exact (Python integers).
    """
    r = rounding_shift(int(acc) * multiplier.mantissa, 31 - multiplier.exponent)
    r += out_zero_point
    return max(INT8_MIN, min(INT8_MAX, r))


def requantize_array(acc: np.ndarray, multiplier: FixedPointMultiplier,
                     out_zero_point: int) -> np.ndarray:
    """Vectorized requantize over an int32/int64 accumulator array.

    Products stay below 2**62 so int64 intermediates are exact.
    """
    v = acc.astype(np.int64) * np.int64(multiplier.mantissa)
    shift = 31 - multiplier.exponent
    if shift <= 0:
        r = v << (-shift)
    else:
        offset = np.int64(1) << (shift - 1)
        mag = (np.abs(v) + offset) >> shift
        r = np.where(v >= 0, mag, -mag)
    r = r + np.int64(out_zero_point)
    return np.clip(r, INT8_MIN, INT8_MAX).astype(np.int8)
