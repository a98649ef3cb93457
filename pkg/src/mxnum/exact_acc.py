"""Round-free dot-product accumulation.

Products of two minifloats are exact by construction: the significand of the
product of two (M+1)-bit significands fits in 2M+2 bits and the exponent in
E+2 bits.  Adding such products in a fixed-point register that is wide enough
to hold every possible product magnitude at once never rounds; negative
addends go in as two's complement.  A 64-bit register restricts this to the
narrow formats (e4m3, e3m4); wider ones are rejected at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .minifloat import (
    FloatSpec,
    NumClass,
    Unpacked,
    format_info,
    unpack,
)

__all__ = [
    "ExactProduct",
    "ExactAccumulator",
    "ProductShape",
    "UnsupportedSpecial",
    "WindowOverflow",
    "AccumulatorTooWide",
    "required_width",
    "required_product_spec",
    "exact_mul",
]

REGISTER_BITS = 64


class UnsupportedSpecial(ValueError):
    """The exact path only handles finite values."""


class WindowOverflow(OverflowError):
    """A product or the running sum left the register's fixed-point window."""


class AccumulatorTooWide(ValueError):
    """The format/block combination needs more than a 64-bit register."""


def _product_limits(spec: FloatSpec) -> tuple[int, int]:
    """Exponent range of exact products: doubled limits plus the carry."""
    fi = format_info(spec)
    return 2 * fi.xi_max + 1, 2 * fi.xi_min


def required_width(spec: FloatSpec) -> int:
    """Fixed-point bits needed to hold any exact product of the format.

    Span of the product exponent range, plus the 2M+1 mantissa bits, plus the
    sign.  For the standard shapes this gives 43 (e4m3), 69 (e5m2), 25 (e3m4),
    81 (e5m10) and 523 (e8m7).
    """
    p_max, p_min = _product_limits(spec)
    return (p_max - p_min + 1) + (2 * spec.man_bits + 1)


class ProductShape(NamedTuple):
    """Width descriptor of an exact-product format (may exceed 16 bits)."""

    exp_bits: int
    man_bits: int

    @property
    def name(self) -> str:
        return f"e{self.exp_bits}m{self.man_bits}"


def required_product_spec(spec: FloatSpec) -> ProductShape:
    """Smallest standard-shaped format that holds every product exactly.

    The mantissa field needs 2M+1 bits; the exponent field is the smallest
    reserved-top width whose normal range covers the doubled limits.  Gives
    e6m7 for e4m3, e7m5 for e5m2, e5m9 for e3m4, e6m21 for e5m10 and e9m15
    for e8m7.
    """
    p_max, p_min = _product_limits(spec)
    for e_bits in range(2, 12):
        bias = (1 << (e_bits - 1)) - 1
        if bias >= p_max and 1 - bias <= p_min:
            return ProductShape(e_bits, 2 * spec.man_bits + 1)
    raise ValueError("no exponent width covers the product range")  # pragma: no cover


@dataclass(frozen=True)
class ExactProduct:
    """Exact product of two finite minifloats.

    The value is ``sign * significand * 2**(exponent - 2M)``.  The significand
    carries at most 2M+2 bits; when the raw product is even and has spilled
    into the top bit it is renormalized (halved, exponent bumped) so that it
    usually sits in [2**2M, 2**(2M+1)).  Odd spilled products keep all 2M+2
    bits, since halving them would round.
    """

    sign: int           # -1, 0 (zero product) or +1
    significand: int
    exponent: int
    man_bits: int       # M of the operand format

    @property
    def normalized_exponent(self) -> int:
        """Binade of the product value (exponent including the carry)."""
        if self.significand == 0:
            return 0
        return self.exponent + (1 if self.significand >> (2 * self.man_bits + 1) else 0)

    @property
    def lsb_exponent(self) -> int:
        return self.exponent - 2 * self.man_bits

    def value(self) -> float:
        return self.sign * math.ldexp(self.significand, self.lsb_exponent)


def _normalized_operand(bits: int, spec: FloatSpec) -> tuple[int, int, int]:
    """(sign, significand in [2^M, 2^(M+1)), exponent) of a finite pattern."""
    u = unpack(bits, spec)
    if u.num_class in (NumClass.INFINITY, NumClass.NAN):
        raise UnsupportedSpecial(f"exact multiply got {u.num_class.value}")
    if u.num_class is NumClass.ZERO or u.significand == 0:
        return 0, 0, 0
    # re-normalize to exactly M fraction bits (subnormals have fewer)
    shift = spec.man_bits - u.frac_bits
    return u.sign, u.significand << shift, u.exponent


def exact_mul(a_bits: int, b_bits: int, spec: FloatSpec) -> ExactProduct:
    """Exact product of two finite patterns; specials are the caller's job."""
    sa, ma, ea = _normalized_operand(a_bits, spec)
    sb, mb, eb = _normalized_operand(b_bits, spec)
    if sa == 0 or sb == 0:
        return ExactProduct(0, 0, 0, spec.man_bits)
    sig = ma * mb
    exp = ea + eb
    if sig >> (2 * spec.man_bits + 1) and not (sig & 1):
        sig >>= 1
        exp += 1
    return ExactProduct(sa * sb, sig, exp, spec.man_bits)


class ExactAccumulator:
    """Two's-complement fixed-point register that adds exact products.

    Bit 0 of the register has weight ``2**min_exponent`` with
    ``min_exponent = 2*xi_min - 2M``, the smallest possible product weight.
    Construction fails when the format's required width plus the carry head-
    room for ``block_len`` addends does not fit the 64-bit register.
    """

    __slots__ = ("spec", "block_len", "register", "min_exponent", "width", "_guard")

    def __init__(self, spec: FloatSpec, block_len: int = 32):
        if block_len < 1:
            raise ValueError("block_len must be positive")
        width = required_width(spec)
        guard = (block_len - 1).bit_length()
        if width + guard > REGISTER_BITS - 1:
            raise AccumulatorTooWide(
                f"format needs {width} bits plus {guard} carry bits; "
                f"only {REGISTER_BITS - 1} magnitude bits are available")
        fi = format_info(spec)
        self.spec = spec
        self.block_len = block_len
        self.register = 0
        self.min_exponent = 2 * fi.xi_min - 2 * spec.man_bits
        self.width = width
        self._guard = guard

    def add(self, p: ExactProduct) -> "ExactAccumulator":
        """Accumulate one product; never rounds."""
        if p.sign == 0:
            return self
        shift = p.lsb_exponent - self.min_exponent
        if shift >= 0:
            term = p.significand << shift
        else:
            # products of subnormals can sit below the window base, but only
            # with zero bits there; anything else would lose information
            if p.significand & ((1 << -shift) - 1):
                raise WindowOverflow("product extends below the register window")
            term = p.significand >> -shift
        reg = self.register + p.sign * term
        if reg >= 1 << (REGISTER_BITS - 1) or reg < -(1 << (REGISTER_BITS - 1)):
            raise WindowOverflow("register overflow")
        self.register = reg
        return self

    __iadd__ = add

    def unpack(self) -> Unpacked:
        """Exact sign/exponent/significand view of the register."""
        if self.register == 0:
            return Unpacked(NumClass.ZERO, 1)
        sign = 1 if self.register > 0 else -1
        mag = abs(self.register)
        frac_bits = mag.bit_length() - 1
        return Unpacked(NumClass.NORMAL, sign, self.min_exponent + frac_bits,
                        mag, frac_bits)

    def to_float(self) -> float:
        """Register value in the wide carrier (one rounding at most)."""
        return math.ldexp(float(self.register), self.min_exponent)

    def reset(self) -> None:
        self.register = 0
