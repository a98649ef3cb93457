"""The compiled core and the NumPy fallback must agree bit for bit."""

import numpy as np
import pytest

import mxnum._backend as backend
import mxnum._pykernels as pk
from mxnum.minifloat import FloatSpec, RoundingPolicy, get_format

compiled = pytest.mark.skipif(backend.BACKEND != "compiled",
                              reason="compiled core not built")

SPECS = [
    get_format("e4m3"),
    get_format("e5m2"),
    get_format("e3m4"),
    get_format("e5m10"),
    get_format("e8m7"),
    FloatSpec(4, 3),  # reserved-top variant of e4m3
    FloatSpec(5, 2, denorm_enabled=False),
    FloatSpec(2, 1),
    FloatSpec(8, 0),
    FloatSpec(6, 9, saturate_on_overflow=True),
]


def _sample_values(rng, n=20000):
    return np.concatenate([
        rng.standard_normal(n) * 10.0 ** rng.integers(-45, 45, n),
        [0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324, -5e-324, 1e308, -1e308,
         2.0 ** -1022, -(2.0 ** -1022)],
    ])


@compiled
@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.name or f"e{s.exp_bits}m{s.man_bits}+")
@pytest.mark.parametrize("policy", list(RoundingPolicy))
def test_encode_bit_identical(spec, policy, rng):
    vals = _sample_values(rng)
    assert np.array_equal(backend.encode_f64(vals, spec, int(policy)),
                          pk.encode_f64(vals, spec, int(policy)))


@compiled
@pytest.mark.parametrize("fid", ["e4m3", "e5m2", "e3m4", "e5m10", "e8m7"])
def test_quantize_bit_identical(fid, rng):
    spec = get_format(fid)
    vals = rng.standard_normal((400, 32)) * 10.0 ** rng.integers(-30, 30, (400, 32))
    vals[0] = 0.0
    vals[1, :4] = [np.nan, np.inf, -np.inf, 5e-324]
    for policy in RoundingPolicy:
        w1, c1 = backend.quantize_blocks(vals, spec, int(policy))
        w2, c2 = pk.quantize_blocks(vals, spec, int(policy))
        assert np.array_equal(w1, w2)
        assert np.array_equal(c1, c2)


@compiled
def test_block_sums_bit_identical(rng):
    a = rng.standard_normal((9, 128))
    b = rng.standard_normal((7, 128))
    for block in (1, 4, 32, 128):
        assert np.array_equal(backend.block_sums_f64(a, b, block),
                              pk.block_sums_f64(a, b, block))
    ai = rng.integers(-2 ** 24, 2 ** 24, (9, 128))
    bi = rng.integers(-2 ** 24, 2 ** 24, (7, 128))
    assert np.array_equal(backend.block_sums_i64(ai, bi, 32),
                          pk.block_sums_i64(ai, bi, 32))


@compiled
def test_exact_combine_bit_identical(rng):
    isums = rng.integers(-2 ** 46, 2 ** 46, (8, 6, 5))
    shifts = rng.integers(-80, 80, (8, 6, 5)).astype(np.int64)
    shifts[0, 0, 0] = -240
    shifts[1, 0, 0] = 240  # drives one element onto the big-integer path
    assert np.array_equal(backend.combine_scaled_exact(isums, shifts),
                          pk.combine_scaled_exact(isums, shifts))


@compiled
def test_forced_fallback_env(tmp_path):
    import subprocess
    import sys

    code = ("import mxnum._backend as b; print(b.BACKEND)")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"MXNUM_FORCE_FALLBACK": "1", "PATH": "/usr/bin:/bin"},
                         capture_output=True, text=True, cwd="/")
    assert out.stdout.strip() == "fallback"
