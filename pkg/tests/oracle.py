"""Independent reference implementations used to freeze expected values.

Everything here works in exact rational arithmetic (fractions / integers) and
derives results from the format's value map directly, never through the
package's encode/decode bit manipulation.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from fractions import Fraction
from functools import lru_cache

from mxnum.minifloat import FloatSpec, RoundingPolicy

POS_INF = "inf"
NEG_INF = "-inf"
NAN = "nan"


def pattern_value(bits: int, spec: FloatSpec):
    """Case-split evaluation of a pattern: Fraction, signed zero, or special."""
    E, M, b = spec.exp_bits, spec.man_bits, spec.bias
    s = (bits >> (E + M)) & 1
    k = (bits >> M) & ((1 << E) - 1)
    m = bits & ((1 << M) - 1)
    sign = -1 if s else 1
    if spec.reserved_top_exponent and k == (1 << E) - 1:
        if m == 0:
            return NEG_INF if s else POS_INF
        return NAN
    if not spec.reserved_top_exponent and k == (1 << E) - 1 and m == (1 << M) - 1:
        return NAN
    if k == 0 and m == 0:
        return Fraction(0)
    if k == 0 and spec.denorm_enabled:
        return sign * Fraction(m, 1 << M) * Fraction(2) ** (1 - b)
    return sign * (1 + Fraction(m, 1 << M)) * Fraction(2) ** (k - b)


@lru_cache(maxsize=16)
def finite_values(spec: FloatSpec):
    """Sorted distinct finite values with one representative code each."""
    seen: dict[Fraction, int] = {}
    for bits in range(1 << spec.bits):
        v = pattern_value(bits, spec)
        if isinstance(v, Fraction):
            # prefer the +0 pattern for zero
            if v not in seen or bits < seen[v]:
                seen.setdefault(v, bits)
    values = sorted(seen)
    return values, [seen[v] for v in values]


@lru_cache(maxsize=16)
def finite_floats(spec: FloatSpec):
    """The same value set as exact float64s (every value is a small dyadic),
    plus exact midpoints between neighbours and code lookups."""
    values, codes = finite_values(spec)
    floats = [float(v) for v in values]
    assert all(Fraction(f) == v for f, v in zip(floats, values))
    mids = [(lo + hi) / 2 for lo, hi in zip(floats, floats[1:])]
    for m, lo, hi in zip(mids, values, values[1:]):
        assert Fraction(m) == (lo + hi) / 2  # adjacent dyadics: midpoint exact
    return floats, mids, codes


def _significand_is_even(value: Fraction, spec: FloatSpec) -> bool:
    """Even/odd of the value's mantissa integer on the format's grid."""
    if value == 0:
        return True
    a = abs(value)
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if Fraction(2) ** e > a:
        e -= 1
    e = max(e, spec.min_normal_exponent)
    quantum = Fraction(2) ** (e - spec.man_bits)
    n = a / quantum
    assert n.denominator == 1
    return n.numerator % 2 == 0


def nearest_encode(value, spec: FloatSpec,
                   policy: RoundingPolicy = RoundingPolicy.TIES_TO_AWAY) -> int:
    """Pick the format's nearest value by exact comparison; returns a code.

    Overflow follows the format's semantics: saturate when there is no
    infinity encoding or the spec says to, otherwise round to infinity
    (except truncation, which never leaves the finite range).
    """
    neg_zero = False
    if isinstance(value, float):
        if math.isnan(value):
            return spec.nan_code
        if math.isinf(value):
            if spec.has_infinity:
                return (spec.sign_mask if value < 0 else 0) | spec.inf_code
            return spec.nan_code
        neg_zero = value == 0.0 and math.copysign(1.0, value) < 0
        value = Fraction(value)
    values, codes = finite_values(spec)
    floats, mids, _ = finite_floats(spec)
    neg = value < 0 or neg_zero
    a = -value if neg else value
    sbit = spec.sign_mask if neg else 0

    max_fin = values[-1]
    if a > max_fin:
        # beyond the largest finite value
        if policy == RoundingPolicy.TRUNCATE:
            return sbit | spec.max_normal_code
        ulp_top = Fraction(2) ** (spec.max_normal_exponent - spec.man_bits)
        overflow_from = max_fin + ulp_top / 2
        over = a >= overflow_from  # ties go up under both nearest policies
        if not over:
            return sbit | spec.max_normal_code
        if spec.has_infinity and not spec.saturate_on_overflow:
            return sbit | spec.inf_code
        return sbit | spec.max_normal_code

    # comparisons below happen on exact float64 values: every candidate and
    # every adjacent midpoint is a dyadic that float64 holds exactly, and the
    # input (if it arrived as a float) is too
    af = float(a)
    exact_float = Fraction(af) == a
    i = bisect_left(floats, af) if exact_float else bisect_left(values, a)
    if i < len(values) and values[i] == a:
        code = codes[i]
        return sbit | code if a != 0 else sbit
    if policy == RoundingPolicy.TRUNCATE:
        pick_i = i - 1
    else:
        mid = mids[i - 1]
        if exact_float:
            below, at = af < mid, af == mid
        else:
            below, at = a < Fraction(mid), a == Fraction(mid)
        if below:
            pick_i = i - 1
        elif not at:
            pick_i = i
        elif policy == RoundingPolicy.TIES_TO_AWAY:
            pick_i = i
        else:
            pick_i = i - 1 if _significand_is_even(values[i - 1], spec) else i
    code = codes[pick_i]
    if values[pick_i] == 0:
        return sbit
    return sbit | code


def exact_dot(xs, ys) -> Fraction:
    """Exact rational dot product of two float sequences."""
    total = Fraction(0)
    for x, y in zip(xs, ys):
        total += Fraction(x) * Fraction(y)
    return total


def adjacent_pairs(spec: FloatSpec):
    """Consecutive positive finite values of a format."""
    values, _ = finite_values(spec)
    pos = [v for v in values if v > 0]
    return list(zip(pos, pos[1:]))


def fraction_ulp(value, spec: FloatSpec) -> Fraction:
    """Straddling-gap ulp on the exact grid (infinite beyond the range)."""
    a = abs(Fraction(value))
    values, _ = finite_values(spec)
    if a > values[-1]:
        return Fraction(-1)  # marker: infinite gap
    if a < Fraction(spec.min_normal):
        return Fraction(spec.min_positive)
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if Fraction(2) ** e > a:
        e -= 1
    return Fraction(2) ** (e - spec.man_bits)
