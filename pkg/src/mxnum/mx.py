"""Microscaling block-quantized vectors.

A vector of n wide values is stored as n element codes in a tiny float format
plus one shared power-of-two scale per block of B elements.  Block
construction picks the scale that parks the largest normal input at the top
binade of the element format, maximizing the usable dynamic range; an element
is recovered as ``code_value * 2**w`` of its block.

The dot product of two such vectors factors into per-block dot products of
the raw element codes, each scaled by the product of the two block scales,
accumulated across blocks in the wide carrier.  The intra-block accumulator
is selectable:

* ``WIDE``   - float64 products and sums (default),
* ``EXACT``  - round-free integer accumulation (see ``exact_acc``); the whole
  reduction, including the cross-block combination, rounds exactly once,
* ``NARROW`` - a same-format accumulator, kept only to demonstrate how it
  overflows on blocks with large same-sign elements.

With the table path enabled (8-bit element formats, ``MX_LUT_DISABLE`` not
set) the wide path reads element products from the multiply table promoted to
bfloat16-width codes instead of multiplying decoded values directly; for
e4m3 and e5m2 the two give bit-identical results because their exact products
fit the promoted format.
"""

from __future__ import annotations

import enum
import math
from typing import Iterable, Iterator

import numpy as np

from . import _backend
from .exact_acc import ExactAccumulator
from .minifloat import (
    FloatSpec,
    RoundingPolicy,
    decode_array,
    encode,
    get_format,
)

__all__ = [
    "AccumulatorKind",
    "NAN_SCALE_CODE",
    "MxVector",
    "MxIterator",
    "LengthMismatch",
    "BlockMismatch",
    "StaleIterator",
    "quantize_block",
    "mx_from_values",
    "mx_dot",
    "dot_narrow_stats",
]

NAN_SCALE_CODE = -128  # reserved scale exponent marking a poisoned block
DEFAULT_BLOCK = 32


class AccumulatorKind(enum.Enum):
    WIDE = "wide"
    EXACT = "exact"
    NARROW = "narrow"


class LengthMismatch(ValueError):
    pass


class BlockMismatch(ValueError):
    pass


class StaleIterator(RuntimeError):
    """The owning vector changed length since this iterator's buffer fill."""


def quantize_block(values, spec: FloatSpec,
                   policy: RoundingPolicy | None = None) -> tuple[int, np.ndarray]:
    """Quantize one block: returns (scale exponent w, element codes).

    If no input is a normal number the scale exponent is 0; otherwise
    ``w = ilogb(max normal magnitude) - xi_max``, clamped to the scale code
    range, so the largest element lands in the format's top binade.  A block
    shorter than B is allowed; the scale only ever looks at real elements.
    """
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if policy is None:
        policy = spec.rounding
    w, codes = _backend.quantize_blocks(v[None, :], spec, int(policy))
    return int(w[0]), codes[0]


def mx_from_values(values: Iterable[float], block_len: int = DEFAULT_BLOCK,
                   spec: FloatSpec | None = None,
                   policy: RoundingPolicy | None = None) -> "MxVector":
    """Build a block-quantized vector from any iterable of wide values."""
    return MxVector.from_values(values, block_len=block_len, spec=spec,
                                policy=policy)


class MxVector:
    """Element codes plus one power-of-two scale exponent per block."""

    __slots__ = ("spec", "block_len", "n", "_codes", "_scales", "_version",
                 "rounding")

    def __init__(self, spec: FloatSpec, block_len: int, n: int,
                 codes: np.ndarray, scales: np.ndarray,
                 rounding: RoundingPolicy | None = None):
        if block_len < 1:
            raise ValueError("block length must be positive")
        blocks = -(-n // block_len)
        if scales.shape != (blocks,):
            raise ValueError(f"expected {blocks} scales, got {scales.shape}")
        if codes.shape != (blocks * block_len,):
            raise ValueError("codes must be zero-padded to whole blocks")
        self.spec = spec
        self.block_len = block_len
        self.n = n
        self._codes = codes
        self._scales = scales
        self._version = 0
        self.rounding = spec.rounding if rounding is None else rounding

    # -- construction -----------------------------------------------------

    @classmethod
    def from_values(cls, values, block_len: int = DEFAULT_BLOCK,
                    spec: FloatSpec | None = None,
                    policy: RoundingPolicy | None = None) -> "MxVector":
        if spec is None:
            spec = get_format("e4m3")
        if policy is None:
            policy = spec.rounding
        if isinstance(values, np.ndarray):
            arr = values.astype(np.float64, copy=False).ravel()
        else:
            arr = np.fromiter(iter(values), dtype=np.float64)
        n = arr.size
        blocks = -(-n // block_len) if n else 0
        padded = np.zeros(blocks * block_len, dtype=np.float64)
        padded[:n] = arr
        if blocks:
            w, codes = _backend.quantize_blocks(
                padded.reshape(blocks, block_len), spec, int(policy))
        else:
            w = np.zeros(0, dtype=np.int32)
            codes = np.zeros((0, block_len), dtype=np.uint16)
        return cls(spec, block_len, n, codes.reshape(-1),
                   w.astype(np.int8), rounding=policy)

    @classmethod
    def from_raw(cls, codes, scales, spec: FloatSpec,
                 block_len: int = DEFAULT_BLOCK, n: int | None = None) -> "MxVector":
        """Wrap pre-built codes and scale exponents (tests and adversarial inputs)."""
        codes = np.asarray(codes, dtype=np.uint16).ravel()
        scales = np.asarray(scales, dtype=np.int8).ravel()
        if n is None:
            n = codes.size
        blocks = -(-n // block_len)
        padded = np.zeros(blocks * block_len, dtype=np.uint16)
        padded[:codes.size] = codes
        if scales.size != blocks:
            raise ValueError(f"expected {blocks} scales, got {scales.size}")
        return cls(spec, block_len, n, padded, scales.copy())

    # -- basic queries ------------------------------------------------------

    @property
    def blocks(self) -> int:
        return self._scales.size

    def scale_exponent(self, j: int) -> int:
        return int(self._scales[j])

    def block_codes(self, j: int) -> np.ndarray:
        lo = j * self.block_len
        hi = min(lo + self.block_len, self.n)
        return self._codes[lo:hi].copy()

    def poison_block(self, j: int) -> None:
        """Mark a block's scale as NaN; every element of it reads as NaN."""
        self._scales[j] = NAN_SCALE_CODE

    def has_nan_scale(self) -> bool:
        return bool((self._scales == NAN_SCALE_CODE).any())

    def __len__(self) -> int:
        return self.n

    def get(self, i: int) -> float:
        """Decompress one element: code value times its block's scale."""
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} out of range for length {self.n}")
        w = self._scales[i // self.block_len]
        if w == NAN_SCALE_CODE:
            return math.nan
        from .minifloat import decode
        return math.ldexp(decode(int(self._codes[i]), self.spec), int(w))

    __getitem__ = get

    def to_array(self) -> np.ndarray:
        """Decompress the whole vector to float64."""
        if self.n == 0:
            return np.zeros(0)
        dec = decode_array(self._codes, self.spec).reshape(self.blocks, self.block_len)
        w = self._scales.astype(np.int32)
        out = np.ldexp(dec, w[:, None])
        out[w == NAN_SCALE_CODE] = np.nan
        return out.reshape(-1)[: self.n].copy()

    def __iter__(self) -> Iterator[float]:
        return iter(self.to_array().tolist())

    # -- mutation -----------------------------------------------------------

    def extend(self, values) -> None:
        """Append wide values, re-quantizing the tail block they land in."""
        new = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                         dtype=np.float64).ravel()
        if new.size == 0:
            return
        tail_start = (self.n // self.block_len) * self.block_len
        tail = self.to_array()[tail_start:self.n]
        merged = np.concatenate([tail, new])
        keep_blocks = tail_start // self.block_len
        rebuilt = MxVector.from_values(merged, self.block_len, self.spec,
                                       self.rounding)
        self._codes = np.concatenate([self._codes[:tail_start], rebuilt._codes])
        self._scales = np.concatenate([self._scales[:keep_blocks],
                                       rebuilt._scales]).astype(np.int8)
        self.n = tail_start + merged.size
        self._version += 1

    def _commit_block(self, j: int, buffer: np.ndarray,
                      policy: RoundingPolicy) -> None:
        w, codes = _backend.quantize_blocks(buffer[None, :], self.spec, int(policy))
        lo = j * self.block_len
        self._codes[lo:lo + self.block_len] = codes[0]
        self._scales[j] = np.int8(w[0])

    def _block_values(self, j: int) -> np.ndarray:
        lo = j * self.block_len
        dec = decode_array(self._codes[lo:lo + self.block_len], self.spec)
        w = int(self._scales[j])
        if w == NAN_SCALE_CODE:
            return np.full(self.block_len, np.nan)
        return np.ldexp(dec, w)

    def begin(self, auto_commit: bool = False) -> "MxIterator":
        return MxIterator(self, auto_commit=auto_commit)

    # -- diagnostics ----------------------------------------------------------

    def dump(self) -> str:
        """Debug text, one line per block: scale exponent and element codes."""
        lines = []
        for j in range(self.blocks):
            codes = " ".join(f"{c:02x}" for c in self.block_codes(j))
            lines.append(f"block {j}: w={int(self._scales[j])} codes={codes}")
        return "\n".join(lines)

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return (f"MxVector(n={self.n}, B={self.block_len}, "
                f"spec={self.spec!r}, blocks={self.blocks})")


class MxIterator:
    """Block-buffered cursor over an MxVector.

    The buffer holds the decompressed current block.  ``write`` touches only
    the buffer; ``commit`` re-quantizes it back into the vector.  With
    ``auto_commit`` a dirty buffer is committed when the cursor crosses a
    block boundary or the iterator is closed or garbage collected.  No
    synchronization: concurrent committing iterators on one vector are the
    caller's problem.
    """

    __slots__ = ("owner", "auto_commit", "_pos", "_block", "_buffer",
                 "_dirty", "_version", "_closed")

    def __init__(self, owner: MxVector, auto_commit: bool = False):
        self.owner = owner
        self.auto_commit = auto_commit
        self._pos = 0
        self._block = -1
        self._buffer = np.zeros(owner.block_len)
        self._dirty = False
        self._version = owner._version
        self._closed = False
        if owner.n:
            self._load_block(0)

    # -- internals ----------------------------------------------------------

    def _check(self) -> None:
        if self._closed:
            raise StaleIterator("iterator is closed")
        if self._version != self.owner._version:
            raise StaleIterator("owner changed length since the buffer was filled")

    def _load_block(self, j: int) -> None:
        self._buffer = self.owner._block_values(j)
        self._block = j
        self._dirty = False

    # -- cursor ---------------------------------------------------------------

    @property
    def position(self) -> int:
        return self._pos

    @property
    def dirty(self) -> bool:
        return self._dirty

    def advance(self, k: int = 1) -> "MxIterator":
        self._check()
        pos = self._pos + k
        if not 0 <= pos <= self.owner.n:
            raise IndexError(f"cannot advance to {pos}")
        self._pos = pos
        if pos < self.owner.n:
            j = pos // self.owner.block_len
            if j != self._block:
                if self.auto_commit and self._dirty:
                    self.commit()
                self._load_block(j)
        elif self.auto_commit and self._dirty:
            self.commit()
        return self

    def read(self) -> float:
        self._check()
        if self._pos >= self.owner.n:
            raise IndexError("read past the end")
        return float(self._buffer[self._pos % self.owner.block_len])

    def write(self, value: float) -> None:
        self._check()
        if self._pos >= self.owner.n:
            raise IndexError("write past the end")
        self._buffer[self._pos % self.owner.block_len] = value
        self._dirty = True

    def refresh(self) -> None:
        """Drop buffered changes and re-read the current block."""
        self._check()
        if self._block >= 0:
            self._load_block(self._block)

    def commit(self) -> None:
        """Re-quantize the buffer into the owner (no-op when clean)."""
        self._check()
        if not self._dirty or self._block < 0:
            return
        self.owner._commit_block(self._block, self._buffer, self.owner.rounding)
        self._dirty = False

    def close(self) -> None:
        if self._closed:
            return
        if (self.auto_commit and self._dirty
                and self._version == self.owner._version):
            self.commit()
        self._closed = True

    def __enter__(self) -> "MxIterator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self):  # pragma: no cover - exercised indirectly
        try:
            self.close()
        except Exception:
            pass


# ---------------------------------------------------------------------------
# dot products
#
# The vector dot and the tensor module's matrix multiply share the block
# machinery below, which operates on stacked rows: codes (R, nb*B) with scale
# exponents (R, nb) against codes (S, nb*B) with (S, nb), producing (R, S).
# That keeps a 1x1 "matmul" bit-identical to mx_dot by construction.

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Row-parallelism for the block-dot kernels (1 disables threading)."""
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


def _special_code_mask(codes: np.ndarray, spec: FloatSpec) -> np.ndarray:
    from .luts import _is_nan_codes

    nan = _is_nan_codes(codes, spec)
    if spec.has_infinity:
        return nan | ((codes & np.uint16(spec.mag_mask)) == np.uint16(spec.inf_code))
    return nan


def _row_split(rows: int):
    if _num_threads <= 1 or rows < 2 * _num_threads:
        return None
    step = -(-rows // _num_threads)
    return [slice(i, min(i + step, rows)) for i in range(0, rows, step)]


def _parallel_rows(fn, rows: int, out: np.ndarray) -> np.ndarray:
    """Run fn(slice) -> array over row ranges, possibly across threads."""
    split = _row_split(rows)
    if split is None:
        out[:] = fn(slice(0, rows))
        return out
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=len(split)) as pool:
        for sl, res in zip(split, pool.map(fn, split)):
            out[sl] = res
    return out


_mul_value_tables: dict[tuple, np.ndarray] = {}


def _mul_value_table(t) -> np.ndarray:
    """decode(mul_table) cached per format pair; magnitudes only."""
    key = (t.in_spec, t.out_spec)
    vt = _mul_value_tables.get(key)
    if vt is None:
        vt = decode_array(t.mul_table, t.out_spec)
        vt.flags.writeable = False
        _mul_value_tables[key] = vt
    return vt


def _mm_lut_block_sums(ca: np.ndarray, cb: np.ndarray, spec: FloatSpec,
                       block: int) -> np.ndarray | None:
    """(nb, R, S) tree-reduced product sums through the multiply table.

    Product values are gathered from a decoded copy of the table and the
    sign applied as a factor, which yields the same float64 values as
    decoding ``lut_mul``'s signed codes.
    """
    from . import luts
    from ._pykernels import _pad_pow2, _tree_sum

    if not luts.luts_enabled() or spec.bits > 8:
        return None
    t = luts.get_luts(spec, get_format("e8m7"))
    vt = _mul_value_table(t)
    R, K = ca.shape
    S = cb.shape[0]
    nb = K // block
    mm = np.uint16(spec.mag_mask)
    mag_a, mag_b = ca & mm, cb & mm
    neg_a = (ca & np.uint16(spec.sign_mask)).astype(bool)
    neg_b = (cb & np.uint16(spec.sign_mask)).astype(bool)
    sgn_a = np.where(neg_a, -1.0, 1.0)
    sgn_b = np.where(neg_b, -1.0, 1.0)
    sums = np.empty((nb, R, S))
    for j in range(nb):
        sl = slice(j * block, (j + 1) * block)
        prod = vt[mag_a[:, None, sl], mag_b[None, :, sl]]
        prod = prod * (sgn_a[:, None, sl] * sgn_b[None, :, sl])
        prod, _ = _pad_pow2(prod, block)
        sums[j] = _tree_sum(prod)
    return sums


def _mm_wide(ca: np.ndarray, wa: np.ndarray, cb: np.ndarray, wb: np.ndarray,
             spec: FloatSpec, block: int, allow_lut: bool = True) -> np.ndarray:
    """Wide-carrier blocked matmul of code rows; scales folded in block order."""
    R = ca.shape[0]
    S = cb.shape[0]
    nb = wa.shape[1]

    def run(rows: slice) -> np.ndarray:
        sums = None
        if allow_lut:
            sums = _mm_lut_block_sums(ca[rows], cb, spec, block)
        if sums is None:
            da = decode_array(ca[rows], spec)
            db = decode_array(cb, spec)
            sums = _backend.block_sums_f64(da, db, block)
        expo = (wa[rows].T[:, :, None] + wb.T[:, None, :]).astype(np.int32)
        nan_blk = ((wa[rows] == NAN_SCALE_CODE).T[:, :, None]
                   | (wb == NAN_SCALE_CODE).T[:, None, :])
        out = np.zeros((sums.shape[1], S))
        for j in range(nb):
            term = np.ldexp(sums[j], expo[j])
            if nan_blk[j].any():
                term = np.where(nan_blk[j], np.nan, term)
            out += term
        return out

    return _parallel_rows(run, R, np.empty((R, S)))


def _mm_exact(ca: np.ndarray, wa: np.ndarray, cb: np.ndarray, wb: np.ndarray,
              spec: FloatSpec, block: int) -> np.ndarray:
    """Exact blocked matmul: one rounding per output element.

    Pairs that involve NaN/infinity element codes or a NaN scale are screened
    out of the integer path and take the wide result instead.
    """
    ExactAccumulator(spec, block)  # validates the register model
    R = ca.shape[0]
    S = cb.shape[0]
    q = spec.quantum_exponent

    spec_a = _special_code_mask(ca, spec).any(axis=1) | (wa == NAN_SCALE_CODE).any(axis=1)
    spec_b = _special_code_mask(cb, spec).any(axis=1) | (wb == NAN_SCALE_CODE).any(axis=1)
    affected = spec_a[:, None] | spec_b[None, :]

    def run(rows: slice) -> np.ndarray:
        da = decode_array(ca[rows], spec)
        db = decode_array(cb, spec)
        if affected[rows].any():
            da = np.where(_special_code_mask(ca[rows], spec), 0.0, da)
            db = np.where(_special_code_mask(cb, spec), 0.0, db)
        ia = np.ldexp(da, -q).astype(np.int64)
        ib = np.ldexp(db, -q).astype(np.int64)
        isums = _backend.block_sums_i64(ia, ib, block)
        shifts = ((wa[rows].T[:, :, None] + wb.T[:, None, :]).astype(np.int64)
                  + 2 * q)
        return _backend.combine_scaled_exact(isums, shifts)

    out = _parallel_rows(run, R, np.empty((R, S)))
    if affected.any():
        wide = _mm_wide(ca, wa, cb, wb, spec, block)
        out = np.where(affected, wide, out)
    return out


def _check_pair(a: MxVector, b: MxVector) -> None:
    if a.n != b.n:
        raise LengthMismatch(f"lengths differ: {a.n} vs {b.n}")
    if a.block_len != b.block_len:
        raise BlockMismatch(f"block lengths differ: {a.block_len} vs {b.block_len}")
    if a.spec != b.spec:
        raise BlockMismatch("element formats differ")


def dot_narrow_stats(a: MxVector, b: MxVector) -> tuple[float, int]:
    """Dot product with a same-format intra-block accumulator.

    Products are formed exactly, but every running sum is rounded back into
    the element format, so blocks whose partial sums leave the format's range
    overflow.  Returns (value, number of blocks that overflowed to infinity
    from finite addends).
    """
    _check_pair(a, b)
    from .minifloat import decode

    spec = a.spec
    da = decode_array(a._codes, spec)
    db = decode_array(b._codes, spec)
    overflowed = 0
    total = 0.0
    for j in range(a.blocks):
        wa, wb = int(a._scales[j]), int(b._scales[j])
        if wa == NAN_SCALE_CODE or wb == NAN_SCALE_CODE:
            return math.nan, overflowed
        acc_code = 0
        finite_inputs = True
        for i in range(j * a.block_len, (j + 1) * a.block_len):
            p = float(da[i]) * float(db[i])
            if not math.isfinite(p):
                finite_inputs = False
            acc_val = decode(acc_code, spec) + p
            acc_code = encode(acc_val, spec, a.rounding)
        block_val = decode(acc_code, spec)
        if math.isinf(block_val) and finite_inputs:
            overflowed += 1
        total += math.ldexp(block_val, wa + wb)
    return total, overflowed


def mx_dot(a: MxVector, b: MxVector,
           acc: AccumulatorKind = AccumulatorKind.WIDE) -> float:
    """Factored dot product: per-block code dots, scaled, then combined.

    With ``EXACT`` the result equals the exact rational dot product of the
    decompressed vectors rounded once at the end, and is invariant under
    permutations that respect block boundaries.
    """
    _check_pair(a, b)
    if a.n == 0:
        return 0.0
    ca, wa = a._codes[None, :], a._scales.astype(np.int64)[None, :]
    cb, wb = b._codes[None, :], b._scales.astype(np.int64)[None, :]
    if acc is AccumulatorKind.WIDE:
        return float(_mm_wide(ca, wa, cb, wb, a.spec, a.block_len)[0, 0])
    if acc is AccumulatorKind.EXACT:
        return float(_mm_exact(ca, wa, cb, wb, a.spec, a.block_len)[0, 0])
    if acc is AccumulatorKind.NARROW:
        return dot_narrow_stats(a, b)[0]
    raise ValueError(f"unknown accumulator kind: {acc!r}")
