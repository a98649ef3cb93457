"""Software emulation of small floating-point formats.

A format is described by a :class:`FloatSpec` (exponent bits ``E``, mantissa
bits ``M``, subnormal support, rounding policy).  Bit patterns are plain
integers of width ``1 + E + M``; values travel through a float64 carrier,
which is wide enough to hold every representable value and every exact
intermediate for the formats in scope (``E <= 8``, ``M <= 10``).

Encoding is done with exact integer arithmetic on the float64 significand, so
rounding is correct for every input (no double rounding through a narrower
intermediate).

Conventions:

* NaN is canonicalized on the value path: ``decode`` of any NaN pattern
  returns a positive float64 NaN and ``encode`` of any NaN produces the
  canonical quiet-NaN pattern with sign 0.  The lossless path is
  ``unpack``/``pack``, which preserve NaN sign and payload for a same-spec
  round trip.
* Formats without a reserved top exponent (OCP-style E4M3) have no
  infinities: a single all-ones pattern per sign is NaN, overflow always
  saturates to the largest normal, and infinite inputs encode to NaN.
* With subnormals disabled the biased exponent 0 is an ordinary binade at
  ``2^-bias`` (no hidden-bit drop); only the all-zero mantissa still means
  zero.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

__all__ = [
    "RoundingPolicy",
    "NumClass",
    "FloatSpec",
    "MinifloatBits",
    "Unpacked",
    "FormatInfo",
    "decode",
    "encode",
    "classify",
    "unpack",
    "pack",
    "format_info",
    "ulp",
    "decode_array",
    "encode_array",
    "get_format",
    "format_ids",
    "WIDE_FORMAT_ID",
]


class RoundingPolicy(enum.IntEnum):
    """Tie handling when a value falls between two representable numbers."""

    TIES_TO_AWAY = 0  # default: midpoints go to the larger magnitude
    TIES_TO_EVEN = 1  # IEEE 754 default, required by the OCP MX spec
    TRUNCATE = 2      # round toward zero


class NumClass(enum.Enum):
    ZERO = "zero"
    SUBNORMAL = "subnormal"
    NORMAL = "normal"
    INFINITY = "infinity"
    NAN = "nan"


@dataclass(frozen=True)
class FloatSpec:
    """Descriptor of a small binary floating-point format.

    ``reserved_top_exponent`` selects IEEE-style encodings (top biased
    exponent holds infinities and NaNs) versus the OCP E4M3 convention
    (top exponent is a normal binade, all-ones mantissa is the only NaN).
    ``saturate_on_overflow`` picks the overflow outcome for formats that do
    have infinities; formats without them always saturate.
    """

    exp_bits: int
    man_bits: int
    denorm_enabled: bool = True
    reserved_top_exponent: bool = True
    saturate_on_overflow: bool = False
    rounding: RoundingPolicy = RoundingPolicy.TIES_TO_AWAY
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not (2 <= self.exp_bits <= 8):
            raise ValueError(f"exponent bits must be in 2..8, got {self.exp_bits}")
        if not (0 <= self.man_bits <= 10):
            raise ValueError(f"mantissa bits must be in 0..10, got {self.man_bits}")
        if self.bits > 16:
            raise ValueError("format does not fit in 16 bits")
        if not self.reserved_top_exponent and self.man_bits == 0:
            raise ValueError("a format without a reserved top exponent needs at least one mantissa bit for NaN")

    # -- widths and masks ------------------------------------------------

    @property
    def bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def sign_mask(self) -> int:
        return 1 << (self.exp_bits + self.man_bits)

    @property
    def mag_mask(self) -> int:
        return self.sign_mask - 1

    @property
    def code_mask(self) -> int:
        return (1 << self.bits) - 1

    @property
    def exp_field_max(self) -> int:
        return (1 << self.exp_bits) - 1

    @property
    def man_field_max(self) -> int:
        return (1 << self.man_bits) - 1

    # -- derived exponent range -------------------------------------------

    @property
    def max_biased_normal(self) -> int:
        """Largest biased exponent that encodes a finite value."""
        return self.exp_field_max - 1 if self.reserved_top_exponent else self.exp_field_max

    @property
    def max_normal_exponent(self) -> int:
        return self.max_biased_normal - self.bias

    @property
    def min_normal_exponent(self) -> int:
        # With subnormals off, biased exponent 0 decodes with a hidden bit,
        # extending the normal range one binade down.
        return 1 - self.bias if self.denorm_enabled else -self.bias

    @property
    def max_normal_mantissa(self) -> int:
        """Mantissa field of the largest finite value."""
        if self.reserved_top_exponent:
            return self.man_field_max
        return self.man_field_max - 1  # all-ones is the NaN pattern

    @property
    def max_normal_code(self) -> int:
        return (self.max_biased_normal << self.man_bits) | self.max_normal_mantissa

    @property
    def max_normal(self) -> float:
        return math.ldexp((1 << self.man_bits) + self.max_normal_mantissa,
                          self.max_normal_exponent - self.man_bits)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.min_normal_exponent)

    @property
    def min_positive(self) -> float:
        if self.denorm_enabled:
            return math.ldexp(1.0, self.min_normal_exponent - self.man_bits)
        return self.min_normal

    @property
    def min_positive_exponent(self) -> int:
        """Binade of the smallest representable positive value."""
        if self.denorm_enabled:
            return self.min_normal_exponent - self.man_bits
        return self.min_normal_exponent

    @property
    def quantum_exponent(self) -> int:
        """Every finite value is an integer multiple of ``2**quantum_exponent``."""
        return self.min_normal_exponent - self.man_bits

    # -- special codes ----------------------------------------------------

    @property
    def has_infinity(self) -> bool:
        return self.reserved_top_exponent

    @property
    def inf_code(self) -> int:
        if not self.reserved_top_exponent:
            raise ValueError("format has no infinity encoding")
        return self.exp_field_max << self.man_bits

    @property
    def nan_code(self) -> int:
        """Canonical (positive) quiet NaN pattern."""
        if self.reserved_top_exponent:
            if self.man_bits == 0:
                raise ValueError("format cannot encode NaN (no mantissa bits)")
            return (self.exp_field_max << self.man_bits) | (1 << (self.man_bits - 1))
        return (self.exp_field_max << self.man_bits) | self.man_field_max

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        tag = self.name or f"e{self.exp_bits}m{self.man_bits}"
        return f"FloatSpec({tag})"


class MinifloatBits(NamedTuple):
    """A bit pattern paired with the format it belongs to."""

    bits: int
    spec: FloatSpec

    def value(self) -> float:
        return decode(self.bits, self.spec)

    def num_class(self) -> NumClass:
        return classify(self.bits, self.spec)


@dataclass(frozen=True)
class Unpacked:
    """Sign/exponent/significand form of a decoded pattern.

    For finite non-zero values the hidden bit is explicit: the value is
    ``sign * significand * 2**(exponent - frac_bits)`` with
    ``2**frac_bits <= significand < 2**(frac_bits + 1)`` (so ``exponent`` is
    the binade).  NaN stores its raw payload in ``significand``.
    """

    num_class: NumClass
    sign: int = 1
    exponent: int = 0
    significand: int = 0
    frac_bits: int = 0

    def value(self) -> float:
        if self.num_class is NumClass.NAN:
            return math.nan
        if self.num_class is NumClass.INFINITY:
            return math.inf * self.sign
        if self.num_class is NumClass.ZERO:
            return 0.0 * self.sign
        return self.sign * math.ldexp(self.significand, self.exponent - self.frac_bits)


class FormatInfo(NamedTuple):
    xi_max: int
    xi_min: int
    max_normal: float
    min_normal: float
    min_positive: float


def _check_bits(bits: int, spec: FloatSpec) -> None:
    if not isinstance(bits, (int, np.integer)):
        raise TypeError(f"bit pattern must be an integer, got {type(bits).__name__}")
    if bits < 0 or bits > spec.code_mask:
        raise ValueError(f"bit pattern 0x{bits:x} does not fit in {spec.bits} bits")


def _fields(bits: int, spec: FloatSpec) -> tuple[int, int, int]:
    s = (bits >> (spec.exp_bits + spec.man_bits)) & 1
    k = (bits >> spec.man_bits) & spec.exp_field_max
    m = bits & spec.man_field_max
    return s, k, m


def classify(bits: int, spec: FloatSpec) -> NumClass:
    """Which case of the format's value map a pattern falls into."""
    _check_bits(int(bits), spec)
    _, k, m = _fields(int(bits), spec)
    if spec.reserved_top_exponent and k == spec.exp_field_max:
        return NumClass.INFINITY if m == 0 else NumClass.NAN
    if not spec.reserved_top_exponent and k == spec.exp_field_max and m == spec.man_field_max:
        return NumClass.NAN
    if k == 0 and m == 0:
        return NumClass.ZERO
    if k == 0 and spec.denorm_enabled:
        return NumClass.SUBNORMAL
    return NumClass.NORMAL


def decode(bits: int, spec: FloatSpec) -> float:
    """Exact value of a bit pattern in a float64 carrier."""
    bits = int(bits)
    _check_bits(bits, spec)
    s, k, m = _fields(bits, spec)
    sign = -1.0 if s else 1.0
    cls = classify(bits, spec)
    if cls is NumClass.NAN:
        return math.nan
    if cls is NumClass.INFINITY:
        return sign * math.inf
    if cls is NumClass.ZERO:
        return sign * 0.0
    if cls is NumClass.SUBNORMAL:
        return sign * math.ldexp(m, 1 - spec.bias - spec.man_bits)
    # normal; with subnormals disabled the k == 0 binade keeps its hidden bit
    return sign * math.ldexp((1 << spec.man_bits) + m, k - spec.bias - spec.man_bits)


def unpack(bits: int, spec: FloatSpec) -> Unpacked:
    bits = int(bits)
    _check_bits(bits, spec)
    s, k, m = _fields(bits, spec)
    sign = -1 if s else 1
    cls = classify(bits, spec)
    if cls is NumClass.NAN:
        return Unpacked(NumClass.NAN, sign, 0, m, 0)
    if cls is NumClass.INFINITY:
        return Unpacked(NumClass.INFINITY, sign)
    if cls is NumClass.ZERO:
        return Unpacked(NumClass.ZERO, sign)
    if cls is NumClass.SUBNORMAL:
        frac_bits = m.bit_length() - 1
        exponent = (1 - spec.bias - spec.man_bits) + frac_bits
        return Unpacked(NumClass.SUBNORMAL, sign, exponent, m, frac_bits)
    return Unpacked(NumClass.NORMAL, sign, k - spec.bias,
                    (1 << spec.man_bits) + m, spec.man_bits)


# ---------------------------------------------------------------------------
# encoding


def _round_shifted(sig: int, shift: int, policy: RoundingPolicy) -> int:
    """Round ``sig * 2**-shift`` to an integer (shift >= 1)."""
    floor = sig >> shift
    rem = sig & ((1 << shift) - 1)
    if rem == 0 or policy == RoundingPolicy.TRUNCATE:
        return floor
    half = 1 << (shift - 1)
    if rem > half:
        return floor + 1
    if rem < half:
        return floor
    if policy == RoundingPolicy.TIES_TO_AWAY:
        return floor + 1
    return floor + (floor & 1)  # ties to even


def _overflow_code(spec: FloatSpec, policy: RoundingPolicy) -> int:
    # Truncation can never pass the largest normal; formats without an
    # infinity encoding always saturate.
    if (policy == RoundingPolicy.TRUNCATE or spec.saturate_on_overflow
            or not spec.reserved_top_exponent):
        return spec.max_normal_code
    return spec.inf_code


def encode_from_integer(sign_neg: bool, sig: int, exp2: int,
                        spec: FloatSpec, policy: RoundingPolicy) -> int:
    """Round the exact value ``(+/-) sig * 2**exp2`` (sig > 0) into a pattern."""
    sbit = spec.sign_mask if sign_neg else 0
    M = spec.man_bits
    binade = exp2 + sig.bit_length() - 1
    min_exp = spec.min_normal_exponent

    if binade >= min_exp:
        q = binade - M
    elif spec.denorm_enabled:
        q = spec.min_positive_exponent
    else:
        # nothing between 0 and the smallest normal; compare the exact value
        # sig * 2**exp2 against the midpoint 2**(min_exp - 1)
        cmp_shift = exp2 - (min_exp - 1)
        if cmp_shift >= 0:
            above = sig << cmp_shift > 1
            tie = sig << cmp_shift == 1
        else:
            above = sig > (1 << -cmp_shift)
            tie = sig == (1 << -cmp_shift)
        if policy == RoundingPolicy.TRUNCATE:
            return sbit
        if above or (tie and policy == RoundingPolicy.TIES_TO_AWAY):
            return sbit | (1 << M)  # smallest normal
        return sbit

    shift = q - exp2
    if shift > 0:
        n = _round_shifted(sig, shift, policy)
    else:
        n = sig << -shift

    if binade >= min_exp:
        code_mag = n + ((binade + spec.bias - 1) << M)
    else:
        code_mag = n  # subnormal grid; n == 2**M lands exactly on min normal
    if n == 0:
        return sbit
    if code_mag > spec.max_normal_code:
        return sbit | _overflow_code(spec, policy)
    return sbit | code_mag


def encode(value: float, spec: FloatSpec, policy: RoundingPolicy | None = None) -> int:
    """Nearest representable pattern for a float64 value under a policy."""
    if policy is None:
        policy = spec.rounding
    value = float(value)
    if math.isnan(value):
        return spec.nan_code
    neg = math.copysign(1.0, value) < 0
    if math.isinf(value):
        if spec.has_infinity:
            return (spec.sign_mask if neg else 0) | spec.inf_code
        return spec.nan_code  # no infinities: infinite input degrades to NaN
    if value == 0.0:
        return spec.sign_mask if neg else 0
    mant, e2 = math.frexp(abs(value))
    sig = int(math.ldexp(mant, 53))  # exact: float64 has a 53-bit significand
    return encode_from_integer(neg, sig, e2 - 53, spec, policy)


def pack(u: Unpacked, spec: FloatSpec, policy: RoundingPolicy | None = None) -> int:
    """Encode an unpacked number; lossless when it came from the same spec."""
    if policy is None:
        policy = spec.rounding
    sbit = spec.sign_mask if u.sign < 0 else 0
    if u.num_class is NumClass.ZERO:
        return sbit
    if u.num_class is NumClass.INFINITY:
        if spec.has_infinity:
            return sbit | spec.inf_code
        return sbit | spec.nan_code
    if u.num_class is NumClass.NAN:
        payload = u.significand
        if spec.reserved_top_exponent and 0 < payload <= spec.man_field_max:
            return sbit | (spec.exp_field_max << spec.man_bits) | payload
        return sbit | spec.nan_code
    if u.significand == 0:
        return sbit
    return encode_from_integer(u.sign < 0, u.significand,
                               u.exponent - u.frac_bits, spec, policy)


# ---------------------------------------------------------------------------
# format queries

# Exponent limits used for accumulator sizing.  The standard shapes follow the
# published convention (subnormal-inclusive for the 8-bit formats, normal-only
# for the 16-bit ones); anything else falls back to first principles.
_XI_MIN_TABLE = {(4, 3): -9, (5, 2): -16, (3, 4): -4, (5, 10): -14, (8, 7): -126}


def format_info(spec: FloatSpec) -> FormatInfo:
    """Exponent limits and boundary values of a format."""
    xi_min = _XI_MIN_TABLE.get((spec.exp_bits, spec.man_bits),
                               spec.min_positive_exponent)
    return FormatInfo(
        xi_max=spec.max_normal_exponent,
        xi_min=xi_min,
        max_normal=spec.max_normal,
        min_normal=spec.min_normal,
        min_positive=spec.min_positive,
    )


def ulp(value: float, spec: FloatSpec) -> float:
    """Gap between the representable values straddling ``value``.

    Beyond the largest normal the upper neighbour is infinite, so the gap is
    ``inf``; below the smallest positive value the gap is the distance from
    zero to it.
    """
    if math.isnan(value):
        return math.nan
    a = abs(value)
    if math.isinf(a):
        return math.inf
    if a > spec.max_normal:
        return math.inf
    if a < spec.min_normal:
        return spec.min_positive
    _, e2 = math.frexp(a)
    return math.ldexp(1.0, (e2 - 1) - spec.man_bits)


# ---------------------------------------------------------------------------
# array paths (vectorized decode table + backend encode kernel)


@lru_cache(maxsize=32)
def _decode_table(spec: FloatSpec) -> np.ndarray:
    """float64 value of every pattern, indexed by the raw code."""
    n = 1 << spec.bits
    codes = np.arange(n, dtype=np.uint32)
    s = (codes >> (spec.exp_bits + spec.man_bits)) & 1
    k = ((codes >> spec.man_bits) & spec.exp_field_max).astype(np.int64)
    m = (codes & spec.man_field_max).astype(np.int64)
    sign = np.where(s == 1, -1.0, 1.0)

    normal = np.ldexp((1 << spec.man_bits) + m,
                      (k - spec.bias - spec.man_bits).astype(np.int32))
    sub = np.ldexp(m, np.int32(1 - spec.bias - spec.man_bits))

    if spec.denorm_enabled:
        vals = np.where(k == 0, sub, normal)
    else:
        vals = normal
    vals = np.where((k == 0) & (m == 0), 0.0, vals)
    vals = sign * vals
    if spec.reserved_top_exponent:
        top = k == spec.exp_field_max
        vals = np.where(top & (m == 0), sign * np.inf, vals)
        vals = np.where(top & (m != 0), np.nan, vals)
    else:
        vals = np.where((k == spec.exp_field_max) & (m == spec.man_field_max),
                        np.nan, vals)
    vals.flags.writeable = False
    return vals


def decode_array(codes: np.ndarray, spec: FloatSpec) -> np.ndarray:
    """Vectorized decode of a code array to float64."""
    return _decode_table(spec)[np.asarray(codes, dtype=np.uint32)]


def encode_array(values: np.ndarray, spec: FloatSpec,
                 policy: RoundingPolicy | None = None) -> np.ndarray:
    """Vectorized encode of float64 values to codes (uint16)."""
    from . import _backend

    if policy is None:
        policy = spec.rounding
    arr = np.ascontiguousarray(values, dtype=np.float64)
    out = _backend.encode_f64(arr.ravel(), spec, int(policy))
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# named formats

WIDE_FORMAT_ID = "f32"  # the native full-precision container, not a FloatSpec

_FORMATS: dict[str, FloatSpec] = {
    # OCP-style E4M3: top exponent is a normal binade, single NaN per sign,
    # overflow saturates to 448.
    "e4m3": FloatSpec(4, 3, reserved_top_exponent=False,
                      saturate_on_overflow=True, name="e4m3"),
    "e5m2": FloatSpec(5, 2, name="e5m2"),
    "e3m4": FloatSpec(3, 4, name="e3m4"),
    "e5m10": FloatSpec(5, 10, name="e5m10"),  # IEEE binary16
    "e8m7": FloatSpec(8, 7, name="e8m7"),     # bfloat16
}


def format_ids() -> list[str]:
    return [*_FORMATS, WIDE_FORMAT_ID]


def get_format(format_id: str) -> FloatSpec:
    """Look up a format by id ("e4m3", ...); plain eXmY ids are derived."""
    key = format_id.strip().lower()
    if key in _FORMATS:
        return _FORMATS[key]
    if key == WIDE_FORMAT_ID:
        raise ValueError("'f32' is the native wide container, not an emulated format")
    m = re.fullmatch(r"e(\d+)m(\d+)", key)
    if m:
        return FloatSpec(int(m.group(1)), int(m.group(2)), name=key)
    raise ValueError(f"unknown format id: {format_id!r}")
