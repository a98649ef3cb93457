"""Lookup-table arithmetic for tiny float formats.

Binary operations on a narrow input format are replaced by table reads that
produce results already promoted to a wider output format (multiplying two
e5m2 codes yields an e8m7 code, for example).  Tables are indexed by magnitude
bits where the operation's sign symmetry allows it:

* reciprocal: 2**(b-1) entries of input-format codes (odd function),
* multiply:   2**(b-1) x 2**(b-1) output codes (sign is the XOR of operands),
* add:        2**b x 2**(b-1) output codes; the second operand is looked up
  by magnitude and the three sign cases are dispatched around it.

Every entry is computed through the reference path (decode both operands,
exact float64 operation, encode into the output format), so a table read and
the direct arithmetic path agree bit for bit.  NaN results are canonical and
unsigned; special cases such as 0 * inf and inf - inf land in the tables at
build time.
"""

from __future__ import annotations

import io
import os
import struct
import threading
import warnings
from dataclasses import dataclass

import numpy as np

from .exact_acc import required_product_spec
from .minifloat import (
    FloatSpec,
    RoundingPolicy,
    decode_array,
    encode_array,
)

__all__ = [
    "LutSet",
    "SpecTooWide",
    "PromotionTooNarrow",
    "build_luts",
    "get_luts",
    "lut_mul",
    "lut_add",
    "lut_recip",
    "lut_promote",
    "save_luts",
    "load_luts",
    "luts_enabled",
]

_MAGIC = b"MXLUT1"


class SpecTooWide(ValueError):
    """Input format too wide to tabulate (more than 8 bits)."""


class PromotionTooNarrow(UserWarning):
    """Output format cannot hold every exact product of the input format."""


@dataclass(frozen=True)
class LutSet:
    """Immutable reciprocal/multiply/add tables for one format pair."""

    in_spec: FloatSpec
    out_spec: FloatSpec
    inv_table: np.ndarray  # (2**(b-1),) uint8, input-format codes
    mul_table: np.ndarray  # (2**(b-1), 2**(b-1)) uint16, output codes
    add_table: np.ndarray  # (2**b, 2**(b-1)) uint16, output codes

    @property
    def table_bytes(self) -> tuple[int, int, int]:
        return self.inv_table.nbytes, self.mul_table.nbytes, self.add_table.nbytes


def _is_nan_codes(codes: np.ndarray, spec: FloatSpec) -> np.ndarray:
    mag = codes & np.uint16(spec.mag_mask)
    k = (mag >> spec.man_bits).astype(np.int64)
    m = (mag & spec.man_field_max).astype(np.int64)
    if spec.reserved_top_exponent:
        return (k == spec.exp_field_max) & (m != 0)
    return (k == spec.exp_field_max) & (m == spec.man_field_max)


def build_luts(in_spec: FloatSpec, out_spec: FloatSpec) -> LutSet:
    """Tabulate reciprocal, multiply and add through the reference path."""
    if in_spec.bits > 8:
        raise SpecTooWide(f"LUT input format must fit in 8 bits, got {in_spec.bits}")
    prod = required_product_spec(in_spec)
    if out_spec.exp_bits < prod.exp_bits or out_spec.man_bits < prod.man_bits:
        warnings.warn(
            f"output format e{out_spec.exp_bits}m{out_spec.man_bits} cannot hold "
            f"every exact product of e{in_spec.exp_bits}m{in_spec.man_bits} "
            f"(needs e{prod.exp_bits}m{prod.man_bits}); products will round",
            PromotionTooNarrow,
            stacklevel=2,
        )

    half = 1 << (in_spec.bits - 1)
    full = 1 << in_spec.bits
    mags = np.arange(half, dtype=np.uint16)
    vals_mag = decode_array(mags, in_spec)           # non-negative magnitudes
    vals_all = decode_array(np.arange(full, dtype=np.uint16), in_spec)

    inv = encode_array(_safe_recip(vals_mag), in_spec, in_spec.rounding)
    with np.errstate(invalid="ignore"):
        mul = encode_array(vals_mag[:, None] * vals_mag[None, :],
                           out_spec, in_spec.rounding)
        add = encode_array(vals_all[:, None] + vals_mag[None, :],
                           out_spec, in_spec.rounding)

    inv = inv.astype(np.uint8)
    for t in (inv, mul, add):
        t.flags.writeable = False
    return LutSet(in_spec, out_spec, inv, mul, add)


def _safe_recip(vals: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 / vals


# -- table reads -------------------------------------------------------------


def _as_code_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint16)


def lut_mul(a, b, t: LutSet):
    """Multiply via table read: look up magnitudes, set the XOR sign."""
    a = _as_code_array(a)
    b = _as_code_array(b)
    smask_in = np.uint16(t.in_spec.sign_mask)
    out = t.mul_table[a & np.uint16(t.in_spec.mag_mask),
                      b & np.uint16(t.in_spec.mag_mask)]
    sign = ((a ^ b) & smask_in).astype(bool)
    signed = np.where(sign & ~_is_nan_codes(out, t.out_spec),
                      out | np.uint16(t.out_spec.sign_mask), out)
    return signed if signed.ndim else int(signed)


def lut_add(a, b, t: LutSet):
    """Add via table read, dispatching on the operands' signs.

    Both negative: negate the sum of the negated operands.  First
    non-negative, second negative: swap so the by-magnitude operand is the
    non-negative one.  Otherwise the direct read applies.
    """
    a = _as_code_array(a)
    b = _as_code_array(b)
    smask = np.uint16(t.in_spec.sign_mask)
    mag = np.uint16(t.in_spec.mag_mask)
    a_neg = (a & smask).astype(bool)
    b_neg = (b & smask).astype(bool)

    first = np.where(a_neg & b_neg, a ^ smask,
                     np.where(~a_neg & b_neg, b, a))
    second = np.where(a_neg & b_neg, (b ^ smask) & mag,
                      np.where(~a_neg & b_neg, a & mag, b & mag))
    out = t.add_table[first, second]
    flip = a_neg & b_neg & ~_is_nan_codes(out, t.out_spec)
    res = np.where(flip, out ^ np.uint16(t.out_spec.sign_mask), out)
    return res if res.ndim else int(res)


def lut_recip(a, t: LutSet):
    """Reciprocal via table read on the magnitude, sign carried over."""
    a = _as_code_array(a)
    smask = np.uint16(t.in_spec.sign_mask)
    out = t.inv_table[a & np.uint16(t.in_spec.mag_mask)].astype(np.uint16)
    sign = (a & smask).astype(bool)
    res = np.where(sign & ~_is_nan_codes(out, t.in_spec), out | smask, out)
    return res if res.ndim else int(res)


def lut_promote(a, t: LutSet):
    """Convert to the output format via a multiply-by-one read."""
    one = encode_array(np.array([1.0]), t.in_spec, t.in_spec.rounding)[0]
    return lut_mul(a, int(one), t)


# -- process-wide cache ------------------------------------------------------

_cache: dict[tuple[FloatSpec, FloatSpec], LutSet] = {}
_cache_lock = threading.Lock()


def get_luts(in_spec: FloatSpec, out_spec: FloatSpec) -> LutSet:
    """Cached tables for a format pair, built once on first use."""
    key = (in_spec, out_spec)
    t = _cache.get(key)
    if t is None:
        with _cache_lock:
            t = _cache.get(key)
            if t is None:
                t = build_luts(in_spec, out_spec)
                _cache[key] = t
    return t


def luts_enabled() -> bool:
    """Whether the table-based arithmetic path is active (env kill switch)."""
    return os.environ.get("MX_LUT_DISABLE") != "1"


# -- binary dump/load (inspection and benchmarks only) -----------------------


def _pack_spec(spec: FloatSpec) -> bytes:
    flags = (int(spec.denorm_enabled)
             | int(spec.reserved_top_exponent) << 1
             | int(spec.saturate_on_overflow) << 2)
    return struct.pack("<BBBB", spec.exp_bits, spec.man_bits, flags,
                       int(spec.rounding))


def _unpack_spec(raw: bytes) -> FloatSpec:
    e, m, flags, rounding = struct.unpack("<BBBB", raw)
    return FloatSpec(e, m,
                     denorm_enabled=bool(flags & 1),
                     reserved_top_exponent=bool(flags & 2),
                     saturate_on_overflow=bool(flags & 4),
                     rounding=RoundingPolicy(rounding))


def save_luts(t: LutSet, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_pack_spec(t.in_spec))
        f.write(_pack_spec(t.out_spec))
        f.write(t.inv_table.tobytes())
        f.write(t.mul_table.astype("<u2").tobytes())
        f.write(t.add_table.astype("<u2").tobytes())


def load_luts(path) -> LutSet:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(6) != _MAGIC:
        raise ValueError("not a LUT dump (bad magic)")
    in_spec = _unpack_spec(buf.read(4))
    out_spec = _unpack_spec(buf.read(4))
    half = 1 << (in_spec.bits - 1)
    full = 1 << in_spec.bits
    inv = np.frombuffer(buf.read(half), dtype=np.uint8).copy()
    mul = np.frombuffer(buf.read(half * half * 2), dtype="<u2").astype(np.uint16).reshape(half, half)
    add = np.frombuffer(buf.read(full * half * 2), dtype="<u2").astype(np.uint16).reshape(full, half)
    for t in (inv, mul, add):
        t.flags.writeable = False
    return LutSet(in_spec, out_spec, inv, mul, add)
