"""Compare the compiled kernel core against the NumPy fallback.

Run from the repository root after building the extension in place:

    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

import mxnum._backend as backend
import mxnum._pykernels as pk
from mxnum.minifloat import get_format


def timeit(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    if backend.BACKEND != "compiled":
        print("compiled core not available; timing the fallback against itself")
    rng = np.random.default_rng(0)
    spec = get_format("e4m3")

    rows = []

    vals = rng.standard_normal(1_000_000)
    rows.append(("encode 1M values",
                 timeit(lambda: backend.encode_f64(vals, spec, 0)),
                 timeit(lambda: pk.encode_f64(vals, spec, 0))))

    blocks = rng.standard_normal((20_000, 32))
    rows.append(("quantize 20k blocks",
                 timeit(lambda: backend.quantize_blocks(blocks, spec, 0)),
                 timeit(lambda: pk.quantize_blocks(blocks, spec, 0))))

    a = rng.standard_normal((256, 256))
    b = rng.standard_normal((256, 256))
    rows.append(("block sums 256x256x256 f64",
                 timeit(lambda: backend.block_sums_f64(a, b, 32)),
                 timeit(lambda: pk.block_sums_f64(a, b, 32))))

    ai = rng.integers(-2 ** 17, 2 ** 17, (256, 256))
    bi = rng.integers(-2 ** 17, 2 ** 17, (256, 256))
    rows.append(("block sums 256x256x256 i64",
                 timeit(lambda: backend.block_sums_i64(ai, bi, 32)),
                 timeit(lambda: pk.block_sums_i64(ai, bi, 32))))

    isums = backend.block_sums_i64(ai, bi, 32)
    shifts = rng.integers(-40, 40, isums.shape).astype(np.int64)
    rows.append(("exact combine 256x256",
                 timeit(lambda: backend.combine_scaled_exact(isums, shifts)),
                 timeit(lambda: pk.combine_scaled_exact(isums, shifts))))

    print(f"backend: {backend.BACKEND}")
    print(f"{'kernel':32s} {'compiled':>10s} {'fallback':>10s} {'speedup':>8s}")
    for name, tc, tf in rows:
        print(f"{name:32s} {tc * 1e3:9.2f}ms {tf * 1e3:9.2f}ms {tf / tc:7.1f}x")


if __name__ == "__main__":
    main()
