"""Microscaling numerics: tiny-float emulation, shared-scale block
quantization, table-based arithmetic, exact fixed-point accumulation, and a
desk-scale GPT training harness built on top of them.

The kernel backend is selected at import: a compiled extension when it was
built, otherwise a NumPy fallback with bit-identical results (see
``mxnum._backend.BACKEND``).
"""

from .minifloat import (
    FloatSpec,
    FormatInfo,
    MinifloatBits,
    NumClass,
    RoundingPolicy,
    Unpacked,
    WIDE_FORMAT_ID,
    classify,
    decode,
    decode_array,
    encode,
    encode_array,
    format_ids,
    format_info,
    get_format,
    pack,
    ulp,
    unpack,
)
from .exact_acc import (
    AccumulatorTooWide,
    ExactAccumulator,
    ExactProduct,
    exact_mul,
    required_product_spec,
    required_width,
)
from .luts import LutSet, build_luts, get_luts, lut_add, lut_mul, lut_promote, lut_recip
from .mx import (
    AccumulatorKind,
    MxIterator,
    MxVector,
    mx_dot,
    mx_from_values,
    quantize_block,
)
from .tensor import (
    ContainerSpec,
    MxMatrix,
    Tensor,
    TransposedView,
    matmul_backward_mx,
    matmul_forward_mx,
    mx_matmul,
    softmax_twopass,
    transpose_view,
)
from .train import GPTConfig, ModelState, PrecisionConfig, preset, run_finetune

__version__ = "0.1.0"

__all__ = [
    "AccumulatorKind",
    "AccumulatorTooWide",
    "ContainerSpec",
    "ExactAccumulator",
    "ExactProduct",
    "FloatSpec",
    "FormatInfo",
    "GPTConfig",
    "LutSet",
    "MinifloatBits",
    "ModelState",
    "MxIterator",
    "MxMatrix",
    "MxVector",
    "NumClass",
    "PrecisionConfig",
    "RoundingPolicy",
    "Tensor",
    "TransposedView",
    "Unpacked",
    "WIDE_FORMAT_ID",
    "build_luts",
    "classify",
    "decode",
    "decode_array",
    "encode",
    "encode_array",
    "exact_mul",
    "format_ids",
    "format_info",
    "get_format",
    "get_luts",
    "lut_add",
    "lut_mul",
    "lut_promote",
    "lut_recip",
    "matmul_backward_mx",
    "matmul_forward_mx",
    "mx_dot",
    "mx_from_values",
    "mx_matmul",
    "pack",
    "preset",
    "quantize_block",
    "required_product_spec",
    "required_width",
    "run_finetune",
    "softmax_twopass",
    "transpose_view",
    "ulp",
    "unpack",
    "__version__",
]
