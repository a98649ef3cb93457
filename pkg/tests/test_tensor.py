"""Containers, transposed views, matmul kernels, softmax, elementwise ops."""

import math

import numpy as np
import pytest

from mxnum.minifloat import RoundingPolicy, get_format, ulp
from mxnum.mx import AccumulatorKind, BlockMismatch, mx_dot, mx_from_values
from mxnum.tensor import (
    ContainerSpec,
    MxMatrix,
    ShapeMismatch,
    Tensor,
    TransposedView,
    embedding_backward,
    embedding_forward,
    gelu_backward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
    matmul_backward_dense,
    matmul_backward_mx,
    matmul_forward_dense,
    matmul_forward_mx,
    mx_matmul,
    residual_add,
    softmax_rows,
    softmax_twopass,
    transpose_view,
)


class TestContainers:
    def test_wide_round_trip(self, rng):
        t = Tensor((3, 4), ContainerSpec("wide"))
        vals = rng.standard_normal((3, 4))
        t.write(vals)
        assert np.array_equal(t.read(), vals)

    def test_minifloat_container_quantizes(self, e8m7, rng):
        t = Tensor((16,), ContainerSpec("minifloat", e8m7))
        vals = rng.standard_normal(16)
        t.write(vals)
        r = t.read()
        assert not np.array_equal(r, vals)
        for x, y in zip(vals, r):
            assert abs(x - y) <= ulp(x, e8m7) / 2

    def test_mx_container_round_trip(self, e4m3, rng):
        t = Tensor((4, 64), ContainerSpec("mx", e4m3, 32))
        vals = rng.standard_normal((4, 64))
        t.write(vals)
        v = mx_from_values(vals.ravel(), 32, e4m3)
        assert np.array_equal(t.read().ravel(), v.to_array())

    def test_shape_checked(self):
        t = Tensor((4,), ContainerSpec("wide"))
        with pytest.raises(ShapeMismatch):
            t.write(np.zeros(5))

    def test_container_spec_validation(self, e4m3):
        with pytest.raises(ValueError):
            ContainerSpec("bogus")
        with pytest.raises(ValueError):
            ContainerSpec("minifloat")
        with pytest.raises(ValueError):
            ContainerSpec("mx", e4m3)


class TestTransposedView:
    def test_row_and_column_vectors_are_identity(self):
        m = [1.0, 2.0, 3.0]
        assert list(transpose_view(m, 1, 3)) == m
        assert list(transpose_view(m, 3, 1)) == m

    def test_two_by_three_order(self):
        v = transpose_view(["a", "b", "c", "d", "e", "f"], 2, 3)
        assert list(v) == ["a", "d", "b", "e", "c", "f"]

    def test_double_transpose_is_identity(self, rng):
        m = rng.standard_normal(12)
        once = transpose_view(m, 3, 4).to_array()
        twice = transpose_view(once, 4, 3).to_array()
        assert np.array_equal(twice, m)

    def test_index_formula(self, rng):
        m = rng.standard_normal(20)
        v = transpose_view(m, 4, 5)
        for i in range(20):
            assert v[i] == m[(i % 4) * 5 + (i // 4)]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            transpose_view([1.0, 2.0], 2, 3)

    def test_mx_from_transposed_view_exact_values(self, e4m3):
        # exactly representable entries survive compression bit for bit, so
        # compressing the view equals transposing the compressed matrix
        m = np.array([1.0, 2.0, 0.5, -4.0, 8.0, -0.25])
        via_view = mx_from_values(transpose_view(m, 2, 3), 4, e4m3).to_array()
        direct = m.reshape(2, 3).T.ravel()
        assert np.array_equal(via_view, direct)


class TestMatmul:
    def test_dense_matches_numpy(self, rng):
        x = rng.standard_normal((5, 7))
        w = rng.standard_normal((3, 7))
        b = rng.standard_normal(3)
        assert np.allclose(matmul_forward_dense(x, w, b), x @ w.T + b,
                           rtol=0, atol=1e-12)

    def test_permutation_weights_reproduce_input(self, e4m3, rng):
        # rows of unit vectors (exactly representable) permute the columns of
        # the input; the only error left is the input's own compression
        x = rng.standard_normal((4, 32))
        perm = rng.permutation(32)
        w = np.eye(32)[perm]
        y = matmul_forward_mx(x, w, None, e4m3, 32)
        xq = MxMatrix.from_dense(x, e4m3, 32).decoded()
        assert np.array_equal(y, xq[:, perm])

    def test_bias_only(self, e4m3, rng):
        b = rng.standard_normal(3)
        y = matmul_forward_mx(np.zeros((4, 32)), rng.standard_normal((3, 32)),
                              b, e4m3, 32)
        assert np.array_equal(y, np.tile(b, (4, 1)))

    def test_matches_dequantized_oracle(self, e4m3, rng):
        x = rng.standard_normal((4, 8))
        w = rng.standard_normal((3, 8))
        b = rng.standard_normal(3)
        xq = MxMatrix.from_dense(x, e4m3, 32)
        wq = MxMatrix.from_dense(w, e4m3, 32)
        got = mx_matmul(xq, wq, b, AccumulatorKind.EXACT)
        want = xq.decoded() @ wq.decoded().T + b
        assert np.abs(got - want).max() < 1e-12

    def test_wide_spec_close_to_dense_oracle(self, e8m7, rng):
        # near-lossless elements: deviation below one ulp of a float32 store
        x = rng.standard_normal((4, 8))
        w = rng.standard_normal((3, 8))
        b = rng.standard_normal(3)
        xq = MxMatrix.from_dense(x, e8m7, 32)
        wq = MxMatrix.from_dense(w, e8m7, 32)
        got = mx_matmul(xq, wq, b, AccumulatorKind.WIDE)
        want = xq.decoded() @ wq.decoded().T + b
        f32_ulp = np.abs(np.spacing(want.astype(np.float32))).astype(np.float64)
        assert (np.abs(got - want) <= f32_ulp).all()

    def test_matmul_equals_mx_dot_per_element(self, e4m3, rng):
        x = rng.standard_normal((3, 64))
        w = rng.standard_normal((5, 64))
        xq = MxMatrix.from_dense(x, e4m3, 32)
        wq = MxMatrix.from_dense(w, e4m3, 32)
        for acc in (AccumulatorKind.WIDE, AccumulatorKind.EXACT):
            y = mx_matmul(xq, wq, None, acc)
            for i in range(3):
                for j in range(5):
                    a = mx_from_values(x[i], 32, e4m3)
                    b = mx_from_values(w[j], 32, e4m3)
                    assert y[i, j] == mx_dot(a, b, acc)

    def test_from_vector_requires_alignment(self, e4m3, rng):
        v = mx_from_values(rng.standard_normal(40), 32, e4m3)
        with pytest.raises(ShapeMismatch):
            MxMatrix.from_vector(v, 4, 10)

    def test_block_mismatch_rejected(self, e4m3, e5m2, rng):
        a = MxMatrix.from_dense(rng.standard_normal((2, 32)), e4m3, 32)
        b = MxMatrix.from_dense(rng.standard_normal((2, 32)), e5m2, 32)
        with pytest.raises(BlockMismatch):
            mx_matmul(a, b)

    def test_row_threading_is_bit_identical(self, e4m3, rng):
        from mxnum.tensor import set_num_threads

        a = MxMatrix.from_dense(rng.standard_normal((64, 64)), e4m3, 32)
        b = MxMatrix.from_dense(rng.standard_normal((16, 64)), e4m3, 32)
        try:
            set_num_threads(1)
            serial_w = mx_matmul(a, b, None, AccumulatorKind.WIDE)
            serial_e = mx_matmul(a, b, None, AccumulatorKind.EXACT)
            set_num_threads(4)
            assert np.array_equal(mx_matmul(a, b, None, AccumulatorKind.WIDE),
                                  serial_w)
            assert np.array_equal(mx_matmul(a, b, None, AccumulatorKind.EXACT),
                                  serial_e)
        finally:
            set_num_threads(1)


class TestMatmulBackward:
    def test_zero_upstream_gradient(self, e4m3, rng):
        x = rng.standard_normal((3, 32))
        w = rng.standard_normal((2, 32))
        dx, dw, db = matmul_backward_mx(x, w, np.zeros((3, 2)), e4m3, 32)
        assert not dx.any() and not dw.any() and not db.any()

    def test_scalar_chain_rule(self):
        # one-element everything: dw = x*dy, dx = dy*w, db = dy
        x = np.array([[3.0]])
        w = np.array([[5.0]])
        dy = np.array([[2.0]])
        dx, dw, db = matmul_backward_mx(x, w, dy, None)
        assert dx[0, 0] == 10.0 and dw[0, 0] == 6.0 and db[0] == 2.0

    def test_wide_containers_match_finite_differences(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        dy = rng.standard_normal((3, 2))
        dx, dw, db = matmul_backward_mx(x, w, dy, None)
        h = 1e-3

        def loss(xv, wv):
            return float((matmul_forward_mx(xv, wv, b, None) * dy).sum())

        for arr, grad, which in ((x, dx, "x"), (w, dw, "w")):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                p = arr.copy(); p[idx] += h
                m = arr.copy(); m[idx] -= h
                fd = ((loss(p, w) - loss(m, w)) / (2 * h) if which == "x"
                      else (loss(x, p) - loss(x, m)) / (2 * h))
                assert abs(fd - grad[idx]) <= 1e-2 * max(abs(fd), abs(grad[idx]), 1e-8)

    def test_backward_against_dense_on_wide_elements(self, e8m7, rng):
        # near-lossless element format: the mx backward tracks the dense one
        # to the compression level, bounded by the magnitude sums of the
        # contributing products (cancellation can blow up plain rel-err)
        x = rng.standard_normal((6, 32))
        w = rng.standard_normal((4, 32))
        dy = rng.standard_normal((6, 4))
        dx1, dw1, db1 = matmul_backward_mx(x, w, dy, e8m7, 32)
        dx2, dw2, db2 = matmul_backward_dense(x, w, dy)
        # both operands carry up to half-ulp-at-block-scale error each
        q = 2.0 ** -7
        assert (np.abs(dx1 - dx2) <= q * (np.abs(dy) @ np.abs(w))).all()
        assert (np.abs(dw1 - dw2) <= q * (np.abs(dy).T @ np.abs(x))).all()
        assert np.array_equal(db1, db2)

    def test_gradients_are_dense_arrays(self, e4m3, rng):
        # gradients land in dense containers, never in MX vectors
        out = matmul_backward_mx(rng.standard_normal((3, 32)),
                                 rng.standard_normal((2, 32)),
                                 rng.standard_normal((3, 2)), e4m3, 32)
        for g in out:
            assert isinstance(g, np.ndarray) and g.dtype == np.float64


class TestSoftmax:
    def test_uniform(self):
        out = softmax_twopass(np.full(8, 2.5), 2.5)
        assert np.allclose(out, 1 / 8, rtol=0, atol=1e-15)

    def test_single_element(self):
        assert softmax_twopass(np.array([7.0]), 7.0).tolist() == [1.0]

    def test_zero_sum_guard(self):
        out = softmax_twopass(np.array([-1e9, -2e9]), 0.0)
        assert out.tolist() == [0.0, 0.0]

    def test_sums_to_one_within_carrier_ulps(self, rng):
        for _ in range(50):
            a = rng.standard_normal(64) * 10
            out = softmax_twopass(a, float(a.max()))
            assert abs(out.sum() - 1.0) <= 64 * np.spacing(1.0)

    def test_rows_version_matches_1d(self, rng):
        a = rng.standard_normal((5, 9))
        maxv = a.max(axis=-1)
        rows = softmax_rows(a, maxv)
        for i in range(5):
            assert np.array_equal(rows[i], softmax_twopass(a[i], float(maxv[i])))

    def test_no_overflow_in_tiny_activation_container(self, e5m2, rng):
        # values spanning the whole representable range: the exponentials are
        # all at most one, so the stored result never overflows
        vals = np.array([57344.0, 1.0, -57344.0, 300.0, -2.0 ** -16, 0.0,
                         1000.0, 57344.0])
        out = softmax_twopass(vals, float(vals.max()))
        t = Tensor((8,), ContainerSpec("minifloat", e5m2))
        t.write(out)
        stored = t.read()
        assert np.isfinite(stored).all()
        for s, o in zip(stored, out):
            assert abs(s - o) <= 2 * ulp(o, e5m2)


class TestElementwise:
    def test_layernorm_constant_rows_are_zero(self):
        x = np.full((3, 8), 4.2)
        out, _, _ = layernorm_forward(x, np.ones(8), np.zeros(8))
        assert np.abs(out).max() == 0.0

    def test_layernorm_normalizes(self, rng):
        x = rng.standard_normal((4, 16)) * 3 + 1
        out, mean, rstd = layernorm_forward(x, np.ones(16), np.zeros(16))
        assert np.allclose(out.mean(axis=-1), 0, atol=1e-12)
        assert np.allclose(out.std(axis=-1), 1, atol=1e-3)

    def test_layernorm_backward_finite_differences(self, rng):
        x = rng.standard_normal((2, 6))
        w = rng.standard_normal(6) + 1
        b = rng.standard_normal(6)
        dy = rng.standard_normal((2, 6))
        out, mean, rstd = layernorm_forward(x, w, b)
        dx, dw, db = layernorm_backward(dy, x, w, mean, rstd)
        h = 1e-5

        def loss(xv, wv, bv):
            return float((layernorm_forward(xv, wv, bv)[0] * dy).sum())

        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            p = x.copy(); p[idx] += h
            m = x.copy(); m[idx] -= h
            fd = (loss(p, w, b) - loss(m, w, b)) / (2 * h)
            assert abs(fd - dx[idx]) < 1e-6 + 1e-4 * abs(fd)

    def test_gelu_zero_and_backward(self, rng):
        assert gelu_forward(np.array([0.0]))[0] == 0.0
        x = rng.standard_normal(32)
        dy = rng.standard_normal(32)
        got = gelu_backward(dy, x)
        h = 1e-6
        fd = dy * (gelu_forward(x + h) - gelu_forward(x - h)) / (2 * h)
        assert np.allclose(got, fd, rtol=1e-4, atol=1e-7)

    def test_residual(self, rng):
        a, b = rng.standard_normal(9), rng.standard_normal(9)
        assert np.array_equal(residual_add(a, b), a + b)

    def test_embedding_lookup_and_backward(self, rng):
        wte = rng.standard_normal((10, 4))
        wpe = rng.standard_normal((6, 4))
        toks = np.array([[1, 3, 3], [0, 9, 2]])
        out = embedding_forward(wte, wpe, toks)
        assert out.shape == (2, 3, 4)
        assert np.array_equal(out[0, 1], wte[3] + wpe[1])
        dout = rng.standard_normal((2, 3, 4))
        dwte, dwpe = embedding_backward(dout, toks, 10, 6)
        # repeated token accumulates both contributions
        assert np.allclose(dwte[3], dout[0, 1] + dout[0, 2])
        assert np.allclose(dwpe[1], dout[:, 1].sum(axis=0))
        assert not dwpe[3:].any()
