"""Container-generic tensor kernels for the network.

Values live in one of three container kinds: native wide floats, minifloat
code arrays, or block-quantized MX vectors.  Kernels read a container into
the float64 carrier, compute there (reductions always wide), and write
results back through the destination container's quantization.  The matrix
multiply additionally has an MX path that compresses rows of the input and
rows of the weight matrix into shared-scale blocks and reduces them with the
factored block dot product; backward passes reuse it on lazily transposed
operands, so gradients are produced by forward-style scans and never
accumulate inside a quantized container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mx as mxmod
from .minifloat import (
    FloatSpec,
    RoundingPolicy,
    decode_array,
    encode_array,
)
from .mx import AccumulatorKind, MxVector, set_num_threads, get_num_threads

__all__ = [
    "ShapeMismatch",
    "ContainerSpec",
    "Tensor",
    "TransposedView",
    "transpose_view",
    "MxMatrix",
    "mx_matmul",
    "matmul_forward_mx",
    "matmul_backward_mx",
    "matmul_forward_dense",
    "matmul_backward_dense",
    "softmax_twopass",
    "softmax_rows",
    "layernorm_forward",
    "layernorm_backward",
    "gelu_forward",
    "gelu_backward",
    "residual_add",
    "embedding_forward",
    "embedding_backward",
    "set_num_threads",
    "get_num_threads",
]


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class ContainerSpec:
    """What kind of storage a value class uses."""

    kind: str  # "wide" | "minifloat" | "mx"
    spec: FloatSpec | None = None
    block: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("wide", "minifloat", "mx"):
            raise ValueError(f"unknown container kind {self.kind!r}")
        if self.kind != "wide" and self.spec is None:
            raise ValueError(f"{self.kind} container needs a format")
        if self.kind == "mx" and not self.block:
            raise ValueError("mx container needs a block length")

    def describe(self) -> str:
        if self.kind == "wide":
            return "f32"
        if self.kind == "minifloat":
            return self.spec.name or f"e{self.spec.exp_bits}m{self.spec.man_bits}"
        return f"mx({self.spec.name},{self.block})"


WIDE = ContainerSpec("wide")


class Tensor:
    """A shaped value in one of the container kinds.

    ``read`` decompresses to float64; ``write`` quantizes whole tensors in
    (deterministic) one shot, which for MX containers re-derives every block
    scale, the same thing a full sequential pass with a committing iterator
    would do.
    """

    __slots__ = ("shape", "cspec", "rounding", "_data", "_codes", "_mx")

    def __init__(self, shape, cspec: ContainerSpec,
                 rounding: RoundingPolicy | None = None):
        self.shape = tuple(int(s) for s in shape)
        self.cspec = cspec
        self.rounding = rounding
        n = int(np.prod(self.shape)) if self.shape else 1
        self._data = None
        self._codes = None
        self._mx = None
        if cspec.kind == "wide":
            self._data = np.zeros(n)
        elif cspec.kind == "minifloat":
            self._codes = np.zeros(n, dtype=np.uint16)
        else:
            self._mx = MxVector.from_values(np.zeros(n), cspec.block,
                                            cspec.spec, rounding)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def kind(self) -> str:
        return self.cspec.kind

    def read(self) -> np.ndarray:
        if self.kind == "wide":
            return self._data.reshape(self.shape).copy()
        if self.kind == "minifloat":
            return decode_array(self._codes, self.cspec.spec).reshape(self.shape)
        return self._mx.to_array().reshape(self.shape)

    def write(self, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.size != self.size:
            raise ShapeMismatch(f"expected {self.size} values, got {arr.size}")
        if self.kind == "wide":
            self._data = arr.copy()
        elif self.kind == "minifloat":
            self._codes = encode_array(arr, self.cspec.spec, self.rounding)
        else:
            self._mx = MxVector.from_values(arr, self.cspec.block,
                                            self.cspec.spec, self.rounding)

    def zero(self) -> None:
        self.write(np.zeros(self.size))

    @property
    def mx(self) -> MxVector:
        if self._mx is None:
            raise ValueError("not an mx container")
        return self._mx

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"Tensor(shape={self.shape}, {self.cspec.describe()})"


# ---------------------------------------------------------------------------
# transposed views


class TransposedView:
    """Lazy transpose of a row-major matrix as a flat iterable.

    ``view[i] = source[(i % rows) * cols + (i // rows)]``; iterating yields
    the transpose in row-major order without copying, which is what the MX
    vector constructor consumes when backward passes need columns.
    """

    __slots__ = ("source", "rows", "cols")

    def __init__(self, source, rows: int, cols: int):
        if len(source) != rows * cols:
            raise ShapeMismatch(
                f"source has {len(source)} elements, expected {rows}x{cols}")
        self.source = source
        self.rows = rows
        self.cols = cols

    def __len__(self) -> int:
        return self.rows * self.cols

    def __getitem__(self, i: int) -> float:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.source[(i % self.rows) * self.cols + (i // self.rows)]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def to_array(self) -> np.ndarray:
        if isinstance(self.source, np.ndarray):
            return np.ascontiguousarray(
                self.source.reshape(self.rows, self.cols).T, dtype=np.float64
            ).reshape(-1)
        return np.fromiter(iter(self), dtype=np.float64, count=len(self))


def transpose_view(m, rows: int, cols: int) -> TransposedView:
    """Iterable view of a row-major (rows x cols) matrix's transpose."""
    return TransposedView(m, rows, cols)


# ---------------------------------------------------------------------------
# blocked matrices for the MX matmul


class MxMatrix:
    """Rows of an operand quantized independently into shared-scale blocks."""

    __slots__ = ("codes", "scales", "spec", "block", "rows", "cols")

    def __init__(self, codes: np.ndarray, scales: np.ndarray, spec: FloatSpec,
                 block: int, rows: int, cols: int):
        self.codes = codes
        self.scales = scales
        self.spec = spec
        self.block = block
        self.rows = rows
        self.cols = cols

    @classmethod
    def from_dense(cls, arr: np.ndarray, spec: FloatSpec, block: int,
                   policy: RoundingPolicy | None = None) -> "MxMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch("expected a 2-D array")
        R, K = arr.shape
        nb = -(-K // block)
        padded = np.zeros((R, nb * block))
        padded[:, :K] = arr
        if policy is None:
            policy = spec.rounding
        w, codes = mxmod._backend.quantize_blocks(
            padded.reshape(R * nb, block), spec, int(policy))
        return cls(codes.reshape(R, nb * block), w.reshape(R, nb).astype(np.int64),
                   spec, block, R, K)

    @classmethod
    def from_vector(cls, vec: MxVector, rows: int, cols: int) -> "MxMatrix":
        """Reinterpret a flat MX vector as rows; blocks must align to rows."""
        if vec.n != rows * cols:
            raise ShapeMismatch(f"vector length {vec.n} != {rows}x{cols}")
        if cols % vec.block_len:
            raise ShapeMismatch(
                f"row length {cols} is not a multiple of block {vec.block_len}")
        nb = cols // vec.block_len
        return cls(vec._codes.reshape(rows, cols),
                   vec._scales.astype(np.int64).reshape(rows, nb),
                   vec.spec, vec.block_len, rows, cols)

    def decoded(self) -> np.ndarray:
        """Dequantized values (codes times scales), shaped (rows, cols)."""
        dec = decode_array(self.codes, self.spec).reshape(
            self.rows, -1, self.block)
        out = np.ldexp(dec, self.scales[:, :, None].astype(np.int32))
        out[self.scales == mxmod.NAN_SCALE_CODE] = np.nan
        return out.reshape(self.rows, -1)[:, :self.cols]


def _as_mx_matrix(operand, spec: FloatSpec, block: int,
                  policy: RoundingPolicy | None = None) -> MxMatrix:
    if isinstance(operand, MxMatrix):
        if operand.spec != spec or operand.block != block:
            raise mxmod.BlockMismatch("operand blocking does not match the matmul config")
        return operand
    return MxMatrix.from_dense(operand, spec, block, policy)


def mx_matmul(a: MxMatrix, b: MxMatrix, bias: np.ndarray | None = None,
              acc: AccumulatorKind = AccumulatorKind.WIDE) -> np.ndarray:
    """(R, S) result of dotting every row of ``a`` with every row of ``b``.

    Each output element equals ``mx_dot`` of the corresponding row vectors;
    the bias is added in the wide carrier afterwards.
    """
    if a.cols != b.cols or a.block != b.block or a.spec != b.spec:
        raise mxmod.BlockMismatch("operands disagree in width, block or format")
    if acc is AccumulatorKind.WIDE:
        out = mxmod._mm_wide(a.codes, a.scales, b.codes, b.scales, a.spec, a.block)
    elif acc is AccumulatorKind.EXACT:
        out = mxmod._mm_exact(a.codes, a.scales, b.codes, b.scales, a.spec, a.block)
    else:
        raise ValueError("the narrow accumulator exists only for the overflow demo")
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :]
    return out


def matmul_forward_mx(x, w, bias, elem_spec: FloatSpec | None, block: int = 32,
                      acc: AccumulatorKind = AccumulatorKind.WIDE,
                      policy: RoundingPolicy | None = None) -> np.ndarray:
    """Matmul with on-line compression: ``y[i, j] = mx_dot(row_i(x), row_j(w)) + bias_j``.

    ``w`` holds one length-K weight vector per output channel (so the dense
    equivalent is ``x @ w.T + bias``).  Operands already blocked as
    :class:`MxMatrix` are used as-is; dense operands are compressed on the
    fly, one MX vector per row.  ``elem_spec=None`` means the operands stay
    in the wide carrier and the multiply runs dense.
    """
    if elem_spec is None:
        return matmul_forward_dense(x, w, bias)
    xa = _as_mx_matrix(x, elem_spec, block, policy)
    wa = _as_mx_matrix(w, elem_spec, block, policy)
    return mx_matmul(xa, wa, bias, acc)


def matmul_backward_mx(x, w, dy, elem_spec: FloatSpec | None, block: int = 32,
                       acc: AccumulatorKind = AccumulatorKind.WIDE,
                       policy: RoundingPolicy | None = None):
    """Gradients of the compressed matmul via forward-style scans.

    The reductions for dW and dX run over transposed operands, so both are
    built as freshly compressed MX rows of the transposes (never by random
    writes into an existing MX container) and reduced with the same block
    dot product as the forward pass.  db is a plain wide column sum.  As in
    the forward op, ``elem_spec=None`` runs the wide dense path.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    R, K = x.shape
    S = w.shape[0]
    if w.shape[1] != K or dy.shape != (R, S):
        raise ShapeMismatch("backward shapes disagree")
    if elem_spec is None:
        return matmul_backward_dense(x, w, dy)
    dyT = np.ascontiguousarray(dy.T)
    xT = np.ascontiguousarray(x.T)
    wT = np.ascontiguousarray(w.T)
    dw = mx_matmul(MxMatrix.from_dense(dyT, elem_spec, block, policy),
                   MxMatrix.from_dense(xT, elem_spec, block, policy), None, acc)
    dx = mx_matmul(MxMatrix.from_dense(dy, elem_spec, block, policy),
                   MxMatrix.from_dense(wT, elem_spec, block, policy), None, acc)
    db = dy.sum(axis=0)
    return dx, dw, db


def matmul_forward_dense(x: np.ndarray, w: np.ndarray,
                         bias: np.ndarray | None = None) -> np.ndarray:
    """Plain wide matmul, same operand convention as the MX path."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"inner dims disagree: {x.shape} vs {w.shape}")
    y = x @ w.T
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)[None, :]
    return y


def matmul_backward_dense(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# softmax


def softmax_twopass(a, maxval: float) -> np.ndarray:
    """Normalized exponentials without storing un-normalized ones.

    First pass accumulates ``sum exp(a_i - maxval)`` in the wide carrier; the
    second recomputes each exponential and scales by the reciprocal, so no
    un-normalized exponential ever lands in a low-precision container.
    Because the caller supplies the row maximum, every exponential is at most
    one and nothing overflows even in an 8-bit activation format.  A zero sum
    yields an all-zero row.
    """
    a = np.asarray(a, dtype=np.float64)
    s = float(np.exp(a - maxval).sum())
    if s == 0.0:
        return np.zeros_like(a)
    inv = 1.0 / s
    return np.exp(a - maxval) * inv


def softmax_rows(a: np.ndarray, maxval: np.ndarray) -> np.ndarray:
    """Row-batched two-pass softmax, bit-identical to the 1-D version.

    Non-finite rows (a diverging run) propagate NaN rather than warn; the
    training loop's wide-loss check is responsible for flagging them.
    """
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        e = np.exp(a - np.asarray(maxval)[..., None])
        s = e.sum(axis=-1)
        out = np.zeros_like(a)
        good = s != 0.0
        inv = np.zeros_like(s)
        inv[good] = 1.0 / s[good]
        out[good] = (np.exp(a - np.asarray(maxval)[..., None]) * inv[..., None])[good]
    return out


# ---------------------------------------------------------------------------
# elementwise kernels (standard definitions, reductions in the wide carrier)

_GELU_SCALE = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


def layernorm_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Returns (out, mean, rstd); statistics are kept wide for backward."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1)
    var = ((x - mean[..., None]) ** 2).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    norm = (x - mean[..., None]) * rstd[..., None]
    return norm * weight + bias, mean, rstd


def layernorm_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray,
                       mean: np.ndarray, rstd: np.ndarray):
    dout = np.asarray(dout, dtype=np.float64)
    norm = (x - mean[..., None]) * rstd[..., None]
    dnorm = dout * weight
    dnorm_mean = dnorm.mean(axis=-1, keepdims=True)
    dnorm_norm_mean = (dnorm * norm).mean(axis=-1, keepdims=True)
    dx = (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rstd[..., None]
    flat = (-1, x.shape[-1])
    dweight = (dout.reshape(flat) * norm.reshape(flat)).sum(axis=0)
    dbias = dout.reshape(flat).sum(axis=0)
    return dx, dweight, dbias


def gelu_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cube = 0.044715 * x ** 3
    return 0.5 * x * (1.0 + np.tanh(_GELU_SCALE * (x + cube)))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cube = 0.044715 * x ** 3
    u = _GELU_SCALE * (x + cube)
    t = np.tanh(u)
    sech2 = 1.0 - t ** 2
    local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_SCALE * (1.0 + 3.0 * 0.044715 * x ** 2)
    return dout * local


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)


def embedding_forward(wte: np.ndarray, wpe: np.ndarray,
                      tokens: np.ndarray) -> np.ndarray:
    """Token plus positional embedding: out[b, t] = wte[tok] + wpe[t]."""
    tokens = np.asarray(tokens)
    T = tokens.shape[-1]
    return wte[tokens] + wpe[None, :T, :]


def embedding_backward(dout: np.ndarray, tokens: np.ndarray,
                       vocab: int, max_t: int):
    dout = np.asarray(dout, dtype=np.float64)
    tokens = np.asarray(tokens)
    Bsz, T, C = dout.shape
    dwte = np.zeros((vocab, C))
    np.add.at(dwte, tokens.reshape(-1), dout.reshape(-1, C))
    dwpe = np.zeros((max_t, C))
    dwpe[:T] = dout.sum(axis=0)
    return dwte, dwpe
