"""Integer and fixed-point primitives.

Affine quantization, the fixed-point scale format, bias rescaling and the
integer-only convolution with 32-bit accumulation.  Everything here is a pure
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1

DEFAULT_NR = 16
DEFAULT_BS = 32

SUPPORTED_BITS = (2, 4, 6, 8, 10)

# Fractional bits of the requantization multiplier.  Multipliers are kept
# below 2**MULT_BITS so acc * mult stays well inside int64.
MULT_BITS = 24
MAX_SHIFT = 48


class InvalidParameterError(ValueError):
    """A quantization parameter is outside its legal domain."""


class AccumulatorOverflowError(ArithmeticError):
    """An integer result left the signed 32-bit range."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero (float in, float out)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _shift_round(total: np.ndarray, shift: int) -> np.ndarray:
    """Integer division by 2**shift, rounding half away from zero."""
    if shift == 0:
        return total
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(total) + half) >> np.int64(shift)
    return np.where(total < 0, -mag, mag)


@dataclass(frozen=True)
class FixedScale:
    """Scale stored as ``raw * 2**-n_r`` with ``raw < 2**b_s``.

    ``raw`` is an int for a per-layer scale or a 1-D int64 array for a
    per-channel scale.
    """

    raw: Union[int, np.ndarray]
    n_r: int = DEFAULT_NR
    b_s: int = DEFAULT_BS

    def __post_init__(self):
        raw = self.raw
        if isinstance(raw, np.ndarray):
            raw = raw.astype(np.int64)
            object.__setattr__(self, "raw", raw)
            if raw.size and (raw.min() < 0 or raw.max() > 2 ** self.b_s - 1):
                raise InvalidParameterError("raw scale outside [0, 2^b_s - 1]")
        else:
            raw = int(raw)
            object.__setattr__(self, "raw", raw)
            if raw < 0 or raw > 2 ** self.b_s - 1:
                raise InvalidParameterError("raw scale outside [0, 2^b_s - 1]")

    @property
    def value(self):
        if isinstance(self.raw, np.ndarray):
            return self.raw.astype(np.float64) * 2.0 ** -self.n_r
        return self.raw * 2.0 ** -self.n_r

    @property
    def per_channel(self) -> bool:
        return isinstance(self.raw, np.ndarray)

    def __len__(self):
        return self.raw.size if self.per_channel else 1

    def raws(self) -> list:
        """Raw values as a list of Python ints."""
        if self.per_channel:
            return [int(r) for r in self.raw]
        return [self.raw]

    def channel(self, k: int) -> "FixedScale":
        if not self.per_channel:
            return self
        return FixedScale(int(self.raw[k]), self.n_r, self.b_s)

    def as_fraction(self, k: int = 0) -> Fraction:
        raw = int(self.raw[k]) if self.per_channel else self.raw
        return Fraction(raw, 2 ** self.n_r)


def fix_scale(s, n_r: int = DEFAULT_NR, b_s: int = DEFAULT_BS) -> FixedScale:
    """Map a real scale (or array of scales) onto the fixed-point grid.

    Shift left by ``n_r`` bits, truncate toward zero and clip to ``b_s`` bits.
    """
    arr = np.asarray(s, dtype=np.float64)
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise InvalidParameterError("scale must be finite and nonnegative")
    raw = np.clip(np.trunc(np.ldexp(arr, n_r)), 0, 2.0 ** b_s - 1)
    if arr.ndim == 0:
        return FixedScale(int(raw), n_r, b_s)
    return FixedScale(raw.astype(np.int64), n_r, b_s)


def smallest_scale(n_r: int = DEFAULT_NR, b_s: int = DEFAULT_BS) -> FixedScale:
    return FixedScale(1, n_r, b_s)


@dataclass
class QTensor:
    """Unsigned integer payload with affine scale/zero-point.

    ``axis`` names the channel axis when scale and zero-point are
    per-channel; ``None`` means per-layer.  ``bit_width`` of ``None`` marks a
    signed, unclipped grid (used for latents).
    """

    values: np.ndarray
    bit_width: Optional[int]
    scale: FixedScale
    zero_point: np.ndarray
    axis: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if self.axis is not None:
            n = self.values.shape[self.axis]
            if len(self.scale) not in (1, n) or self.zero_point.size not in (1, n):
                raise InvalidParameterError("channel count of scale/zero_point does not match axis")
        elif len(self.scale) != 1 or self.zero_point.size != 1:
            raise InvalidParameterError("per-layer QTensor needs a single scale and zero-point")
        if self.bit_width is not None and self.values.size:
            if self.values.min() < 0 or self.values.max() > 2 ** self.bit_width - 1:
                raise InvalidParameterError("payload outside [0, 2^b - 1]")

    def _bcast(self, arr):
        arr = np.asarray(arr)
        if self.axis is None or arr.size == 1:
            return arr.reshape(())
        shape = [1] * self.values.ndim
        shape[self.axis] = arr.size
        return arr.reshape(shape)

    def scale_array(self) -> np.ndarray:
        return self._bcast(np.asarray(self.scale.value, dtype=np.float64))

    def zero_array(self) -> np.ndarray:
        return self._bcast(self.zero_point)

    def centered(self) -> np.ndarray:
        return self.values - self.zero_array()


def _broadcast_param(param, ndim: int, axis: Optional[int]):
    arr = np.asarray(param)
    if axis is None or arr.size == 1:
        return arr.reshape(())
    shape = [1] * ndim
    shape[axis] = arr.size
    return arr.reshape(shape)


def quantize_affine(x, scale: FixedScale, zero_point, bit_width: Optional[int],
                    axis: Optional[int] = None) -> QTensor:
    """``clip(round(x / s) + z, 0, 2^b - 1)`` with ties rounded away from zero."""
    if bit_width is not None and bit_width not in SUPPORTED_BITS:
        raise InvalidParameterError(f"unsupported bit width {bit_width}")
    s = np.asarray(scale.value, dtype=np.float64)
    if np.any(s <= 0):
        raise InvalidParameterError("scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    s_b = _broadcast_param(s, x.ndim, axis)
    z_b = _broadcast_param(np.asarray(zero_point, dtype=np.int64), x.ndim, axis)
    q = round_half_away(x / s_b) + z_b
    if bit_width is not None:
        q = np.clip(q, 0, 2 ** bit_width - 1)
    return QTensor(q.astype(np.int64), bit_width, scale, np.atleast_1d(zero_point), axis)


def dequantize(q: QTensor) -> np.ndarray:
    """``s * (x_int - z)``; exact because ``s`` is dyadic."""
    return q.scale_array() * q.centered()


def compute_zero_point(min_val, scale: FixedScale, bit_width: int):
    """``clip(-round(min / s), 0, 2^b - 1)``; vectorised over channels."""
    s = np.asarray(scale.value, dtype=np.float64)
    if np.any(s <= 0):
        raise InvalidParameterError("scale must be positive")
    z = np.clip(-round_half_away(np.asarray(min_val, dtype=np.float64) / s), 0, 2 ** bit_width - 1)
    z = z.astype(np.int64)
    return int(z) if z.ndim == 0 else z


def _check_int32(arr: np.ndarray, what: str):
    if arr.size and (arr.min() < INT32_MIN or arr.max() > INT32_MAX):
        raise AccumulatorOverflowError(f"{what} exceeds the signed 32-bit range")


def rescale_bias(b_int, s_b: FixedScale, s_w: FixedScale, s_x: FixedScale) -> np.ndarray:
    """Express an integer bias in units of ``s_w * s_x``.

    ``b_int`` is the zero-point-centred integer bias, one entry per output
    channel.  ``s_w`` may be per output channel.  Computed in exact rational
    arithmetic, then rounded half away from zero.
    """
    b = np.atleast_1d(np.asarray(b_int, dtype=np.int64))
    out = np.empty(b.shape, dtype=np.int64)
    sb = s_b.as_fraction()
    sx = s_x.as_fraction()
    for o in range(b.size):
        sw = s_w.as_fraction(o if s_w.per_channel else 0)
        denom = sw * sx
        if denom <= 0:
            raise InvalidParameterError("s_w * s_x must be positive")
        val = sb / denom * int(b[o])
        out[o] = _round_fraction(val)
    _check_int32(out, "rescaled bias")
    return out


def _round_fraction(v: Fraction) -> int:
    mag = abs(v)
    r = (mag.numerator * 2 + mag.denominator) // (mag.denominator * 2)
    return -r if v < 0 else r


def quantize_bias_int32(b, s_w: FixedScale, s_x: FixedScale) -> np.ndarray:
    """Reference INT32 bias: ``round(b / (s_w * s_x))`` without an 8-bit stage."""
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    denom = np.asarray(s_w.value, dtype=np.float64) * s_x.value
    out = round_half_away(b / denom).astype(np.int64)
    _check_int32(out, "int32 bias")
    return out


@dataclass
class AccumTensor:
    """Per-group int32 accumulators and their real-valued scales.

    ``values`` has shape (groups, N, O, H, W); ``combined_scale`` has shape
    (groups, O) and holds ``s_w[o] * s_x[group]``.
    """

    values: np.ndarray
    combined_scale: np.ndarray

    def __post_init__(self):
        _check_int32(self.values, "accumulator")


def _conv_exact(xc: np.ndarray, wc: np.ndarray, stride: int, padding: int,
                transpose: bool, output_padding: int) -> np.ndarray:
    """Integer convolution computed exactly through float64.

    All partial sums are integers far below 2**53, so float64 BLAS is exact.
    """
    from . import tensorad as ad

    xf = xc.astype(np.float64)
    wf = wc.astype(np.float64)
    if transpose:
        out = ad.conv2d_transpose_forward(xf, wf, stride, padding, output_padding)
    else:
        out = ad.conv2d_forward(xf, wf, stride, padding)
    if np.abs(out).max(initial=0.0) >= 2.0 ** 52:
        raise AccumulatorOverflowError("integer convolution left the exact range")
    return np.rint(out).astype(np.int64)


def _common_shift(nums: Sequence[Fraction]) -> int:
    """Largest shift <= MAX_SHIFT keeping every ``num * 2**shift`` below 2**MULT_BITS."""
    top = max(nums)
    if top <= 0:
        raise InvalidParameterError("requantization multiplier must be positive")
    if top >= 2 ** MULT_BITS:
        raise AccumulatorOverflowError("requantization multiplier too large")
    shift = MAX_SHIFT
    while top * 2 ** shift >= 2 ** MULT_BITS:
        shift -= 1
    return shift


def accumulate(x: QTensor, w: QTensor, b_rescaled, bias_ref: FixedScale, *,
               stride: int = 1, padding: int = 0, transpose: bool = False,
               output_padding: int = 0) -> tuple[AccumTensor, list]:
    """Integer MACs of ``(w - z_w) * (x - z_x)`` plus the rescaled bias.

    Input channels that share an activation scale share one int32
    accumulator; with a per-layer activation scale there is exactly one.
    The rescaled bias joins the group whose scale equals ``bias_ref``.
    Returns the accumulators and the list of group scales.
    """
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise InvalidParameterError("qconv_integer expects 4-D activations and weights")
    cin = x.values.shape[1]
    w_cin = w.values.shape[0] if transpose else w.values.shape[1]
    if w_cin != cin:
        raise InvalidParameterError("weight and activation channel counts differ")
    xc = x.centered()
    wc = w.centered()
    x_raws = x.scale.raws() if x.scale.per_channel else [x.scale.raw] * cin
    groups: dict[int, list[int]] = {}
    for c, r in enumerate(x_raws):
        groups.setdefault(r, []).append(c)
    ref_raw = bias_ref.raw
    if bias_ref.n_r != x.scale.n_r or ref_raw not in groups:
        raise InvalidParameterError("bias reference scale must equal one activation channel scale")

    accs = []
    scales = []
    b_rescaled = np.asarray(b_rescaled, dtype=np.int64)
    for raw in sorted(groups):
        idx = groups[raw]
        wsub = wc[idx] if transpose else wc[:, idx]
        acc = _conv_exact(xc[:, idx], wsub, stride, padding, transpose, output_padding)
        if raw == ref_raw:
            acc = acc + b_rescaled.reshape(1, -1, 1, 1)
        accs.append(acc)
        scales.append(FixedScale(raw, x.scale.n_r, x.scale.b_s))
    values = np.stack(accs)
    sw = np.broadcast_to(np.asarray(w.scale.value, dtype=np.float64), (values.shape[2],))
    combined = np.stack([sw * s.value for s in scales])
    return AccumTensor(values, combined), scales


def requantize(acc: AccumTensor, group_scales: Sequence[FixedScale], w_scale: FixedScale,
               next_scale: FixedScale, next_zero, bit_width: Optional[int], *,
               relu: bool = False) -> QTensor:
    """Scale int32 accumulators onto the next layer's grid.

    Each (group, output channel) pair gets a fixed-point multiplier
    ``s_w * s_x / s_next``; the groups feeding one output channel share a
    shift.  Products are summed in int64 and shifted back with
    half-away-from-zero rounding.
    """
    n_groups, _, n_out = acc.values.shape[:3]
    z_next = np.broadcast_to(np.atleast_1d(np.asarray(next_zero, dtype=np.int64)), (n_out,))
    nums = [[w_scale.as_fraction(o if w_scale.per_channel else 0) * sx.as_fraction()
             / next_scale.as_fraction(o if next_scale.per_channel else 0)
             for sx in group_scales] for o in range(n_out)]
    shifts = [_common_shift(col) for col in nums]
    raws = np.array([[_round_fraction(nums[o][g] * 2 ** shifts[o]) for o in range(n_out)]
                     for g in range(n_groups)], dtype=np.int64)

    bound = sum(float(np.abs(acc.values[g]).max(initial=0)) * float(raws[g].max())
                for g in range(n_groups))
    if bound >= 2.0 ** 62:
        raise AccumulatorOverflowError("requantization product exceeds int64 headroom")
    total = np.zeros(acc.values.shape[1:], dtype=np.int64)
    for g in range(n_groups):
        total += acc.values[g] * raws[g].reshape(1, -1, 1, 1)
    q = np.empty_like(total)
    for o in range(n_out):
        q[:, o] = _shift_round(total[:, o], shifts[o])
    q = q + z_next.reshape(1, -1, 1, 1)
    if relu:
        q = np.maximum(q, z_next.reshape(1, -1, 1, 1))
    if bit_width is not None:
        q = np.clip(q, 0, 2 ** bit_width - 1)
    else:
        _check_int32(q, "requantized output")
    return QTensor(q, bit_width, next_scale, z_next.copy(), axis=1)


def qconv_integer(x: QTensor, w: QTensor, b_rescaled, next_scale: FixedScale, next_zero, *,
                  bias_ref: Optional[FixedScale] = None, stride: int = 1, padding: int = 0,
                  transpose: bool = False, output_padding: int = 0, relu: bool = False,
                  out_bits: Optional[int] = 8) -> QTensor:
    """Integer-only convolution: int32 accumulation and one requantization.

    ``w`` uses the (O, C, kh, kw) layout for ordinary convolution and
    (C, O, kh, kw) for transposed convolution, with its scale per output
    channel.  ``b_rescaled`` is the bias already expressed in units of
    ``s_w * bias_ref`` (see ``rescale_bias``).  ``out_bits=None`` keeps a
    signed output (latent grid).
    """
    if x.bit_width is not None and x.bit_width > 10 or w.bit_width is not None and w.bit_width > 10:
        raise InvalidParameterError("integer path supports at most 10-bit operands")
    if bias_ref is None:
        bias_ref = x.scale.channel(0) if not x.scale.per_channel else FixedScale(
            int(np.max(x.scale.raw)), x.scale.n_r, x.scale.b_s)
    acc, groups = accumulate(x, w, b_rescaled, bias_ref, stride=stride, padding=padding,
                             transpose=transpose, output_padding=output_padding)
    return requantize(acc, groups, w.scale, next_scale, next_zero, out_bits, relu=relu)
