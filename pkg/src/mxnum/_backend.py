"""Kernel backend selection.

Imports the compiled Cython core when it is installed; otherwise the NumPy
fallback in ``_pykernels`` is used.  Both produce bit-identical results, the
compiled core is just faster.  Set ``MXNUM_FORCE_FALLBACK=1`` to skip the
compiled core (used by the test suite and the benchmark to compare the two).
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels
from .minifloat import FloatSpec

_core = None
if os.environ.get("MXNUM_FORCE_FALLBACK") != "1":
    try:
        from . import _core  # type: ignore[no-redef]
    except ImportError:
        _core = None

BACKEND = "compiled" if _core is not None else "fallback"


def encode_f64(values: np.ndarray, spec: FloatSpec, policy: int) -> np.ndarray:
    if _core is not None:
        return _core.encode_f64(
            np.ascontiguousarray(values, dtype=np.float64),
            spec.exp_bits, spec.man_bits,
            spec.denorm_enabled, spec.reserved_top_exponent,
            spec.saturate_on_overflow, policy,
        )
    return _pykernels.encode_f64(values, spec, policy)


def quantize_blocks(vals2d: np.ndarray, spec: FloatSpec, policy: int):
    if _core is not None:
        # element overflow always saturates during block quantization
        w, codes = _core.quantize_blocks(
            np.ascontiguousarray(vals2d, dtype=np.float64),
            spec.exp_bits, spec.man_bits,
            spec.denorm_enabled, spec.reserved_top_exponent,
            True, policy,
            spec.max_normal_exponent,
        )
        return w, codes
    return _pykernels.quantize_blocks(vals2d, spec, policy)


def block_sums_f64(a: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    if _core is not None:
        return _core.block_sums_f64(
            np.ascontiguousarray(a, dtype=np.float64),
            np.ascontiguousarray(b, dtype=np.float64), block)
    return _pykernels.block_sums_f64(a, b, block)


def block_sums_i64(a: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    if _core is not None:
        return _core.block_sums_i64(
            np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(b, dtype=np.int64), block)
    return _pykernels.block_sums_i64(a, b, block)


def combine_scaled_exact(isums: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    if _core is not None:
        return _core.combine_scaled_exact(
            np.ascontiguousarray(isums, dtype=np.int64),
            np.ascontiguousarray(shifts, dtype=np.int64))
    return _pykernels.combine_scaled_exact(isums, shifts)
