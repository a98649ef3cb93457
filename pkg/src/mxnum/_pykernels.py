"""NumPy implementations of the hot kernels.

The compiled core in ``_core.pyx`` mirrors these bit for bit; either backend
may be selected at import (see ``_backend``).  Reductions use a fixed pairwise
tree so both backends, and the scalar and matrix paths, sum in the same order.
"""

from __future__ import annotations

import math

import numpy as np

from .minifloat import FloatSpec, RoundingPolicy

_TINY64 = np.finfo(np.float64).tiny  # smallest normal float64
_U52 = np.uint64(52)
_U63 = np.uint64(63)
_MAN_MASK = np.uint64((1 << 52) - 1)


def encode_f64(values: np.ndarray, spec: FloatSpec, policy: int) -> np.ndarray:
    """Encode a 1-D float64 array into minifloat codes (uint16)."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    u = v.view(np.uint64)
    s = (u >> _U63).astype(np.int64)
    exp64 = ((u >> _U52) & np.uint64(0x7FF)).astype(np.int64)
    man = (u & _MAN_MASK).astype(np.int64)

    E, M = spec.exp_bits, spec.man_bits
    bias = spec.bias
    sbit = s << (E + M)

    is_special = exp64 == 0x7FF
    is_nan = is_special & (man != 0)
    is_inf = is_special & (man == 0)
    # float64 zeros and subnormals are below half the smallest quantum of
    # every format in scope, so they all round to (signed) zero
    is_zero = exp64 == 0

    m53 = man | np.int64(1 << 52)
    e = exp64 - 1023
    min_exp = spec.min_normal_exponent
    normal_zone = e >= min_exp

    if spec.denorm_enabled:
        shift = np.where(normal_zone, 52 - M,
                         np.minimum(min_exp - M - e + 52, 55))
        floor = m53 >> shift
        rem = m53 - (floor << shift)
        half = np.int64(1) << (shift - 1)
        if policy == RoundingPolicy.TIES_TO_AWAY:
            n = floor + (rem >= half)
        elif policy == RoundingPolicy.TIES_TO_EVEN:
            n = floor + ((rem > half) | ((rem == half) & ((floor & 1) == 1)))
        else:  # truncate
            n = floor
        code_mag = np.where(normal_zone, n + ((e + bias - 1) << M), n)
    else:
        shift = np.full_like(e, 52 - M)
        floor = m53 >> shift
        rem = m53 - (floor << shift)
        half = np.int64(1) << (shift - 1)
        if policy == RoundingPolicy.TIES_TO_AWAY:
            n = floor + (rem >= half)
        elif policy == RoundingPolicy.TIES_TO_EVEN:
            n = floor + ((rem > half) | ((rem == half) & ((floor & 1) == 1)))
        else:
            n = floor
        code_norm = n + ((e + bias - 1) << M)
        # below the smallest normal only zero and the smallest normal exist;
        # compare against the midpoint 2**(min_exp - 1)
        above_half = (e == min_exp - 1) & (man != 0)
        at_half = (e == min_exp - 1) & (man == 0)
        if policy == RoundingPolicy.TIES_TO_AWAY:
            promote = above_half | at_half
        elif policy == RoundingPolicy.TIES_TO_EVEN:
            promote = above_half
        else:
            promote = np.zeros_like(above_half)
        code_sub = np.where(promote, np.int64(1 << M), np.int64(0))
        code_mag = np.where(normal_zone, code_norm, code_sub)

    # overflow handling
    if (policy == RoundingPolicy.TRUNCATE or spec.saturate_on_overflow
            or not spec.reserved_top_exponent):
        ovf = spec.max_normal_code
    else:
        ovf = spec.inf_code
    code_mag = np.where(code_mag > spec.max_normal_code, np.int64(ovf), code_mag)
    code_mag = np.where(code_mag < 0, np.int64(0), code_mag)  # defensive

    # a reserved-top format with no mantissa bits cannot encode NaN; the
    # infinity pattern is the closest thing it has
    nan_code = spec.nan_code if (M > 0 or not spec.reserved_top_exponent) else spec.inf_code

    out = sbit | code_mag
    out = np.where(is_zero, sbit, out)
    if spec.has_infinity:
        out = np.where(is_inf, sbit | np.int64(spec.inf_code), out)
    else:
        out = np.where(is_inf, np.int64(nan_code), out)
    out = np.where(is_nan, np.int64(nan_code), out)
    return out.astype(np.uint16)


def quantize_blocks(vals2d: np.ndarray, spec: FloatSpec, policy: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared-scale quantization of zero-padded blocks (rows of a 2-D array).

    For each row: if no element is a normal float64 the scale exponent is 0;
    otherwise it places the largest-magnitude normal at the top binade of the
    element format.  Returns (scale exponents int32, element codes uint16).

    Element overflow saturates to the largest normal (the scaled maximum can
    round past it by up to half a top-binade step); genuine infinities still
    encode as infinities where the format has them.
    """
    if not spec.saturate_on_overflow:
        import dataclasses

        spec = dataclasses.replace(spec, saturate_on_overflow=True)
    v = np.ascontiguousarray(vals2d, dtype=np.float64)
    a = np.abs(v)
    normal = np.isfinite(v) & (a >= _TINY64)
    p = np.where(normal, a, 0.0).max(axis=1)
    has = normal.any(axis=1)
    _, pe = np.frexp(p)
    w = np.where(has, pe.astype(np.int64) - 1 - spec.max_normal_exponent, 0)
    w = np.clip(w, -127, 127)
    scaled = np.ldexp(v, (-w[:, None]).astype(np.int32))
    codes = encode_f64(scaled.ravel(), spec, policy).reshape(v.shape)
    return w.astype(np.int32), codes


def _tree_sum(prod: np.ndarray) -> np.ndarray:
    """Pairwise reduction over the last axis (length must be a power of two)."""
    n = prod.shape[-1]
    while n > 1:
        prod = prod[..., 0::2] + prod[..., 1::2]
        n >>= 1
    return prod[..., 0]


def _pad_pow2(arr: np.ndarray, block: int) -> tuple[np.ndarray, int]:
    b2 = 1 << (block - 1).bit_length()
    if b2 == block:
        return arr, block
    pad = np.zeros(arr.shape[:-1] + (b2 - block,), dtype=arr.dtype)
    return np.concatenate([arr, pad], axis=-1), b2


def block_sums_f64(a: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    """Per-block pairwise-tree dot sums: (nb, R, S) from (R, K) and (S, K)."""
    R, K = a.shape
    S = b.shape[0]
    nb = K // block
    out = np.empty((nb, R, S), dtype=np.float64)
    for j in range(nb):
        sl = slice(j * block, (j + 1) * block)
        prod = a[:, None, sl] * b[None, :, sl]
        prod, _ = _pad_pow2(prod, block)
        out[j] = _tree_sum(prod)
    return out


def block_sums_i64(a: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    """Exact per-block integer dot sums: (nb, R, S) int64."""
    R, K = a.shape
    S = b.shape[0]
    nb = K // block
    out = np.empty((nb, R, S), dtype=np.int64)
    for j in range(nb):
        sl = slice(j * block, (j + 1) * block)
        prod = a[:, None, sl] * b[None, :, sl]
        out[j] = prod.sum(axis=-1)
    return out


def combine_scaled_exact(isums: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Exactly evaluate ``sum_j isums[j] * 2**shifts[j]`` with one final rounding.

    ``isums`` and ``shifts`` are (nb, R, S) int64.  The result is float64,
    rounded once from the exact integer combination (half to even, the
    carrier's conversion rounding).
    """
    nb, R, S = isums.shape
    base = shifts.min(axis=0)
    rel = shifts - base[None, :, :]
    # bit length of each summand (exact for |isums| < 2**53)
    absv = np.abs(isums).astype(np.float64)
    _, be = np.frexp(absv)
    need = np.where(isums != 0, be + rel, 0).max(axis=0) + max(nb - 1, 0).bit_length()
    safe = need <= 62

    total = np.where(rel < 63, isums << np.minimum(rel, 62), 0).sum(axis=0)
    result = np.ldexp(total.astype(np.float64), base.astype(np.int32))

    if not safe.all():
        for r, s in zip(*np.nonzero(~safe)):
            acc = 0
            for j in range(nb):
                acc += int(isums[j, r, s]) << int(rel[j, r, s])
            result[r, s] = math.ldexp(float(acc), int(base[r, s]))
    return result
