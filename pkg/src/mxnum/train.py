"""Desk-scale GPT training and inference over the container-generic kernels.

The model is a small decoder-only transformer (defaults: 2 layers, 4 heads,
64 channels, byte-level vocabulary, context 64).  Every value class (weights,
activations, gradients, optimizer moments) lives in a container chosen by a
:class:`PrecisionConfig`; kernels read containers into the wide carrier,
compute there, and store results back through the container's quantization.

Named precision presets:

========  ====================================================================
baseline  everything in wide floats
A         weights/activations/gradients in plain bfloat16 vectors
B         A plus a wide master copy of the weights for the optimizer
C         weights/activations/gradients block-quantized with float16 elements
          (a correctness check: should track the baseline closely)
D         weights and gradients block-quantized with e4m3 elements,
          activations bfloat16, master copy, wide probabilities/encodings
D'        D with the round-free fixed-point dot-product accumulator
E         D but activations block-quantized too
F         values in bfloat16, matmuls compress operands to e4m3 blocks on the
          fly, master copy, wide probabilities/encodings
F'        F with the round-free accumulator
G         E with e3m4 elements instead of e4m3
========  ====================================================================

The optimizer always keeps its moment buffers wide; the presets quantize the
three tensor classes the configurations above name.  Probabilities, the final
losses and the encoder output are held wide when ``full_precision_probs`` is
set, which prevents the loss blowing up when a tiny-format container rounds a
probability to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .minifloat import FloatSpec, RoundingPolicy, get_format
from .mx import AccumulatorKind
from . import tensor as T
from .tensor import ContainerSpec, MxMatrix, Tensor

__all__ = [
    "GPTConfig",
    "PrecisionConfig",
    "ModelState",
    "NonFiniteLoss",
    "DataError",
    "PRESET_NAMES",
    "preset",
    "init_model",
    "set_params",
    "forward",
    "loss_and_backward",
    "adamw_step",
    "train_step",
    "run_finetune",
    "generate",
    "next_token_kl",
    "load_corpus",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "write_loss_csv",
    "MAGIC_LLMC",
    "MAGIC_NATIVE",
]


class NonFiniteLoss(RuntimeError):
    """Wide-precision loss went non-finite: the run genuinely diverged."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DataError(ValueError):
    """Unusable corpus or checkpoint input."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GPTConfig:
    max_seq_len: int = 64
    vocab_size: int = 256
    num_layers: int = 2
    num_heads: int = 4
    channels: int = 64

    def __post_init__(self) -> None:
        if self.channels % self.num_heads:
            raise ValueError("channels must divide evenly into heads")


@dataclass(frozen=True)
class PrecisionConfig:
    name: str
    weights: ContainerSpec
    activations: ContainerSpec
    gradients: ContainerSpec
    adam_buffers: ContainerSpec
    master_copy: bool = False
    matmul_mode: str = "direct"  # "direct" | "mx"
    matmul_spec: FloatSpec | None = None
    matmul_block: int = 32
    full_precision_probs: bool = False
    accumulator: AccumulatorKind = AccumulatorKind.WIDE
    rounding: RoundingPolicy = RoundingPolicy.TIES_TO_AWAY

    def describe(self) -> dict:
        return {
            "name": self.name,
            "weights": self.weights.describe(),
            "activations": self.activations.describe(),
            "gradients": self.gradients.describe(),
            "adam_buffers": self.adam_buffers.describe(),
            "master_copy": self.master_copy,
            "matmul_mode": (self.matmul_mode if self.matmul_mode == "direct"
                            else f"mx({self.matmul_spec.name},{self.matmul_block})"),
            "full_precision_probs": self.full_precision_probs,
            "accumulator": self.accumulator.value,
            "rounding": self.rounding.name.lower(),
        }


PRESET_NAMES = ["baseline", "A", "B", "C", "D", "D'", "E", "F", "F'", "G"]


def _presets() -> dict[str, PrecisionConfig]:
    wide = ContainerSpec("wide")
    bf16 = ContainerSpec("minifloat", get_format("e8m7"))
    mx_f16 = ContainerSpec("mx", get_format("e5m10"), 32)
    mx_e4m3 = ContainerSpec("mx", get_format("e4m3"), 32)
    mx_e3m4 = ContainerSpec("mx", get_format("e3m4"), 32)

    base = PrecisionConfig("baseline", wide, wide, wide, wide)
    a = replace(base, name="A", weights=bf16, activations=bf16, gradients=bf16)
    b = replace(a, name="B", master_copy=True)
    c = PrecisionConfig("C", mx_f16, mx_f16, mx_f16, wide, master_copy=True,
                        matmul_mode="mx", matmul_spec=get_format("e5m10"),
                        full_precision_probs=True)
    d = PrecisionConfig("D", mx_e4m3, bf16, mx_e4m3, wide, master_copy=True,
                        matmul_mode="mx", matmul_spec=get_format("e4m3"),
                        full_precision_probs=True)
    dp = replace(d, name="D'", accumulator=AccumulatorKind.EXACT)
    e = replace(d, name="E", activations=mx_e4m3)
    f = PrecisionConfig("F", bf16, bf16, bf16, wide, master_copy=True,
                        matmul_mode="mx", matmul_spec=get_format("e4m3"),
                        full_precision_probs=True)
    fp = replace(f, name="F'", accumulator=AccumulatorKind.EXACT)
    g = PrecisionConfig("G", mx_e3m4, mx_e3m4, mx_e3m4, wide, master_copy=True,
                        matmul_mode="mx", matmul_spec=get_format("e3m4"),
                        full_precision_probs=True)
    return {p.name: p for p in (base, a, b, c, d, dp, e, f, fp, g)}


_PRESETS = _presets()


def preset(name: str, rounding: RoundingPolicy | None = None,
           accumulator: AccumulatorKind | None = None) -> PrecisionConfig:
    """Look up a preset, optionally overriding rounding or the accumulator."""
    key = name.strip()
    if key.lower() == "baseline":
        key = "baseline"
    else:
        key = key.upper()
    if key not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    cfg = _PRESETS[key]
    if rounding is not None:
        cfg = replace(cfg, rounding=rounding)
    if accumulator is not None:
        cfg = replace(cfg, accumulator=accumulator)
    return cfg


# ---------------------------------------------------------------------------
# parameters

_SHARED = ("wte", "wpe")
_PER_LAYER = ("ln1w", "ln1b", "qkvw", "qkvb", "attprojw", "attprojb",
              "ln2w", "ln2b", "fcw", "fcb", "fcprojw", "fcprojb")
_FINAL = ("lnfw", "lnfb")


def _param_shape(name: str, cfg: GPTConfig) -> tuple[int, ...]:
    C, V, Tmax = cfg.channels, cfg.vocab_size, cfg.max_seq_len
    return {
        "wte": (V, C), "wpe": (Tmax, C),
        "ln1w": (C,), "ln1b": (C,),
        "qkvw": (3 * C, C), "qkvb": (3 * C,),
        "attprojw": (C, C), "attprojb": (C,),
        "ln2w": (C,), "ln2b": (C,),
        "fcw": (4 * C, C), "fcb": (4 * C,),
        "fcprojw": (C, 4 * C), "fcprojb": (C,),
        "lnfw": (C,), "lnfb": (C,),
    }[name]


def param_keys(cfg: GPTConfig) -> list[tuple[str, str]]:
    """(key, base name) pairs in serialization order: shared, then each
    per-layer tensor for all layers, then the final layernorm."""
    keys: list[tuple[str, str]] = [(n, n) for n in _SHARED]
    for name in _PER_LAYER:
        keys.extend((f"{name}.{l}", name) for l in range(cfg.num_layers))
    keys.extend((n, n) for n in _FINAL)
    return keys


def _init_param(name: str, shape, rng: np.random.Generator,
                cfg: GPTConfig) -> np.ndarray:
    if name in ("ln1w", "ln2w", "lnfw"):
        return np.ones(shape)
    if name.endswith("b"):
        return np.zeros(shape)
    std = 0.02
    if name in ("attprojw", "fcprojw"):
        std = 0.02 / math.sqrt(2 * cfg.num_layers)  # residual-path scaling
    return rng.normal(0.0, std, size=shape)


@dataclass
class ModelState:
    config: GPTConfig
    precision: PrecisionConfig
    params: dict[str, Tensor]
    master: dict[str, np.ndarray] | None
    adam_m: dict[str, Tensor] = field(default_factory=dict)
    adam_v: dict[str, Tensor] = field(default_factory=dict)

    def param_values(self, key: str) -> np.ndarray:
        return self.params[key].read()

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())


def init_model(cfg: GPTConfig, precision: PrecisionConfig,
               seed: int = 0) -> ModelState:
    """Seeded GPT-2 style initialization into the configured containers."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    master: dict[str, np.ndarray] | None = {} if precision.master_copy else None
    for key, name in param_keys(cfg):
        shape = _param_shape(name, cfg)
        vals = _init_param(name, shape, rng, cfg)
        t = Tensor(shape, precision.weights, precision.rounding)
        t.write(vals)
        params[key] = t
        if master is not None:
            master[key] = np.asarray(vals, dtype=np.float64).copy()
    state = ModelState(cfg, precision, params, master)
    _init_adam(state)
    return state


def _init_adam(state: ModelState) -> None:
    for key, name in param_keys(state.config):
        shape = _param_shape(name, state.config)
        state.adam_m[key] = Tensor(shape, state.precision.adam_buffers,
                                   state.precision.rounding)
        state.adam_v[key] = Tensor(shape, state.precision.adam_buffers,
                                   state.precision.rounding)


def set_params(state: ModelState, values: dict[str, np.ndarray]) -> None:
    """Load wide parameter values into the containers (and master copy)."""
    for key, vals in values.items():
        state.params[key].write(vals)
        if state.master is not None:
            state.master[key] = np.asarray(vals, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# forward


def _act(state: ModelState, shape, wide: bool = False) -> Tensor:
    cspec = ContainerSpec("wide") if wide else state.precision.activations
    return Tensor(shape, cspec, state.precision.rounding)


def _store(state: ModelState, shape, values, wide: bool = False) -> Tensor:
    t = _act(state, shape, wide)
    t.write(values)
    return t


def _matmul_operand(tensor_or_array, rows: int, cols: int,
                    pc: PrecisionConfig) -> MxMatrix:
    """Blocked operand for the MX matmul, reusing container blocks when the
    operand is already quantized with the matmul's element format."""
    if isinstance(tensor_or_array, Tensor):
        t = tensor_or_array
        if (t.kind == "mx" and t.cspec.spec == pc.matmul_spec
                and t.cspec.block == pc.matmul_block
                and cols % pc.matmul_block == 0 and t.size == rows * cols):
            return MxMatrix.from_vector(t.mx, rows, cols)
        arr = t.read().reshape(rows, cols)
    else:
        arr = np.asarray(tensor_or_array, dtype=np.float64).reshape(rows, cols)
    return MxMatrix.from_dense(arr, pc.matmul_spec, pc.matmul_block, pc.rounding)


def _matmul(state: ModelState, x, w, bias, rows, cols_in, cols_out) -> np.ndarray:
    """Configured matmul: dense in the wide carrier, or block-compressed."""
    pc = state.precision
    if pc.matmul_mode == "direct":
        xa = x.read().reshape(rows, cols_in) if isinstance(x, Tensor) else x
        wa = w.read().reshape(cols_out, cols_in) if isinstance(w, Tensor) else w
        return T.matmul_forward_dense(xa, wa, bias)
    xa = _matmul_operand(x, rows, cols_in, pc)
    wa = _matmul_operand(w, cols_out, cols_in, pc)
    return T.mx_matmul(xa, wa, bias, pc.accumulator)


def _matmul_grads(state: ModelState, x: np.ndarray, w: np.ndarray,
                  dy: np.ndarray):
    pc = state.precision
    if pc.matmul_mode == "direct":
        return T.matmul_backward_dense(x, w, dy)
    return T.matmul_backward_mx(x, w, dy, pc.matmul_spec, pc.matmul_block,
                                pc.accumulator, pc.rounding)


def forward(state: ModelState, tokens: np.ndarray):
    """Run the network; returns (wide logits, activation cache)."""
    cfg = state.config
    pc = state.precision
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    Bsz, Tlen = tokens.shape
    if Tlen > cfg.max_seq_len:
        raise DataError(f"sequence length {Tlen} exceeds context {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError("token id out of range")
    C, NH, L = cfg.channels, cfg.num_heads, cfg.num_layers
    hs = C // NH
    fpp = pc.full_precision_probs

    acts: dict[str, object] = {"tokens": tokens}
    p = state.params

    enc = T.embedding_forward(p["wte"].read(), p["wpe"].read(), tokens)
    acts["encoded"] = _store(state, (Bsz, Tlen, C), enc, wide=fpp)

    x = acts["encoded"].read()
    for l in range(L):
        ln1, mu1, rs1 = T.layernorm_forward(
            x, p[f"ln1w.{l}"].read(), p[f"ln1b.{l}"].read())
        acts[f"ln1.{l}"] = _store(state, (Bsz, Tlen, C), ln1)
        acts[f"ln1_stats.{l}"] = (mu1, rs1)

        qkv = _matmul(state, acts[f"ln1.{l}"], p[f"qkvw.{l}"],
                      p[f"qkvb.{l}"].read(),
                      Bsz * Tlen, C, 3 * C).reshape(Bsz, Tlen, 3 * C)
        acts[f"qkv.{l}"] = _store(state, (Bsz, Tlen, 3 * C), qkv)

        qkv_v = acts[f"qkv.{l}"].read()
        q = qkv_v[:, :, :C].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        k = qkv_v[:, :, C:2 * C].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        v = qkv_v[:, :, 2 * C:].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hs)
        causal = np.tril(np.ones((Tlen, Tlen), dtype=bool))
        scores = np.where(causal, scores, 0.0)
        acts[f"preatt.{l}"] = _store(state, (Bsz, NH, Tlen, Tlen), scores)

        pre = acts[f"preatt.{l}"].read()
        masked = np.where(causal, pre, -np.inf)
        att = T.softmax_rows(masked, masked.max(axis=-1))
        acts[f"att.{l}"] = _store(state, (Bsz, NH, Tlen, Tlen), att)

        att_v = acts[f"att.{l}"].read()
        atty = (att_v @ v).transpose(0, 2, 1, 3).reshape(Bsz, Tlen, C)
        acts[f"atty.{l}"] = _store(state, (Bsz, Tlen, C), atty)

        attproj = _matmul(state, acts[f"atty.{l}"], p[f"attprojw.{l}"],
                          p[f"attprojb.{l}"].read(),
                          Bsz * Tlen, C, C).reshape(Bsz, Tlen, C)
        acts[f"attproj.{l}"] = _store(state, (Bsz, Tlen, C), attproj)

        res2 = T.residual_add(x, acts[f"attproj.{l}"].read())
        acts[f"res2.{l}"] = _store(state, (Bsz, Tlen, C), res2)

        x2 = acts[f"res2.{l}"].read()
        ln2, mu2, rs2 = T.layernorm_forward(
            x2, p[f"ln2w.{l}"].read(), p[f"ln2b.{l}"].read())
        acts[f"ln2.{l}"] = _store(state, (Bsz, Tlen, C), ln2)
        acts[f"ln2_stats.{l}"] = (mu2, rs2)

        fch = _matmul(state, acts[f"ln2.{l}"], p[f"fcw.{l}"],
                      p[f"fcb.{l}"].read(),
                      Bsz * Tlen, C, 4 * C).reshape(Bsz, Tlen, 4 * C)
        acts[f"fch.{l}"] = _store(state, (Bsz, Tlen, 4 * C), fch)

        gelu = T.gelu_forward(acts[f"fch.{l}"].read())
        acts[f"fch_gelu.{l}"] = _store(state, (Bsz, Tlen, 4 * C), gelu)

        fcproj = _matmul(state, acts[f"fch_gelu.{l}"], p[f"fcprojw.{l}"],
                         p[f"fcprojb.{l}"].read(),
                         Bsz * Tlen, 4 * C, C).reshape(Bsz, Tlen, C)
        acts[f"fcproj.{l}"] = _store(state, (Bsz, Tlen, C), fcproj)

        res3 = T.residual_add(x2, acts[f"fcproj.{l}"].read())
        acts[f"res3.{l}"] = _store(state, (Bsz, Tlen, C), res3)
        x = acts[f"res3.{l}"].read()

    lnf, muf, rsf = T.layernorm_forward(x, p["lnfw"].read(), p["lnfb"].read())
    acts["lnf"] = _store(state, (Bsz, Tlen, C), lnf)
    acts["lnf_stats"] = (muf, rsf)

    logits = _matmul(state, acts["lnf"], p["wte"], None,
                     Bsz * Tlen, C, cfg.vocab_size).reshape(Bsz, Tlen, cfg.vocab_size)
    acts["logits"] = _store(state, (Bsz, Tlen, cfg.vocab_size), logits)

    logits_w = acts["logits"].read()
    probs = T.softmax_rows(logits_w, logits_w.max(axis=-1))
    acts["probs"] = _store(state, (Bsz, Tlen, cfg.vocab_size), probs, wide=fpp)
    return logits_w, acts


# ---------------------------------------------------------------------------
# loss and backward


def _grad_tensor(state: ModelState, shape, values) -> Tensor:
    t = Tensor(shape, state.precision.gradients, state.precision.rounding)
    t.write(values)
    return t


def loss_and_backward(state: ModelState, acts: dict, targets: np.ndarray,
                      iteration: int | None = None):
    """Mean cross entropy plus parameter gradients in the gradient containers.

    The loss reported (and differentiated) uses the stored probabilities, so
    a container that rounds a probability to zero produces an infinite loss;
    ``NonFiniteLoss`` is raised only when the loss recomputed entirely in the
    wide carrier is itself non-finite, which signals true divergence rather
    than a quantization artifact.
    """
    cfg = state.config
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    Bsz, Tlen = targets.shape
    C, NH, L, V = cfg.channels, cfg.num_heads, cfg.num_layers, cfg.vocab_size
    hs = C // NH
    p = state.params
    tokens = acts["tokens"]

    probs = acts["probs"].read()
    bi = np.arange(Bsz)[:, None]
    ti = np.arange(Tlen)[None, :]
    with np.errstate(divide="ignore"):
        losses = -np.log(probs[bi, ti, targets])
    mean_loss = float(losses.mean())

    logits_w = acts["logits"].read()
    wide_probs = T.softmax_rows(logits_w, logits_w.max(axis=-1))
    with np.errstate(divide="ignore"):
        wide_loss = float(-np.log(wide_probs[bi, ti, targets]).mean())
    if not math.isfinite(wide_loss):
        raise NonFiniteLoss(
            f"wide-precision loss is {wide_loss}"
            + (f" at iteration {iteration}" if iteration is not None else ""),
            iteration=iteration)

    grads: dict[str, Tensor] = {}

    def rt(values: np.ndarray) -> np.ndarray:
        # activation gradients round-trip through the gradient container
        # once per kernel boundary; branches are summed wide beforehand so
        # no quantized buffer is ever used as an accumulator
        return _grad_tensor(state, values.shape, values).read()

    dlogits = probs.copy()
    dlogits[bi, ti, targets] -= 1.0
    dlogits /= Bsz * Tlen
    dlogits = rt(dlogits)

    # lm head (tied with wte)
    lnf = acts["lnf"].read().reshape(Bsz * Tlen, C)
    wte = p["wte"].read()
    dlnf, dwte_head, _ = _matmul_grads(state, lnf, wte,
                                       dlogits.reshape(Bsz * Tlen, V))
    dlnf = rt(dlnf.reshape(Bsz, Tlen, C))

    muf, rsf = acts["lnf_stats"]
    x_res = acts[f"res3.{L-1}"].read()
    dx, dlnfw, dlnfb = T.layernorm_backward(dlnf, x_res, p["lnfw"].read(),
                                            muf, rsf)
    grads["lnfw"] = _grad_tensor(state, (C,), dlnfw)
    grads["lnfb"] = _grad_tensor(state, (C,), dlnfb)
    dx = rt(dx)

    dwte_total = dwte_head  # tied head + embedding grads, summed wide

    for l in reversed(range(L)):
        dres3 = dx  # gradient of res3 = res2 + fcproj
        x2 = acts[f"res2.{l}"].read()

        gelu_out = acts[f"fch_gelu.{l}"].read().reshape(Bsz * Tlen, 4 * C)
        dxg, dfcprojw, dfcprojb = _matmul_grads(
            state, gelu_out, p[f"fcprojw.{l}"].read(),
            dres3.reshape(Bsz * Tlen, C))
        grads[f"fcprojw.{l}"] = _grad_tensor(state, (C, 4 * C), dfcprojw)
        grads[f"fcprojb.{l}"] = _grad_tensor(state, (C,), dfcprojb)
        dgelu = rt(dxg.reshape(Bsz, Tlen, 4 * C))

        fch = acts[f"fch.{l}"].read()
        dfch = rt(T.gelu_backward(dgelu, fch))

        ln2 = acts[f"ln2.{l}"].read().reshape(Bsz * Tlen, C)
        dln2, dfcw, dfcb = _matmul_grads(state, ln2, p[f"fcw.{l}"].read(),
                                         dfch.reshape(Bsz * Tlen, 4 * C))
        grads[f"fcw.{l}"] = _grad_tensor(state, (4 * C, C), dfcw)
        grads[f"fcb.{l}"] = _grad_tensor(state, (4 * C,), dfcb)
        dln2 = rt(dln2.reshape(Bsz, Tlen, C))

        mu2, rs2 = acts[f"ln2_stats.{l}"]
        dres2_ln, dln2w, dln2b = T.layernorm_backward(
            dln2, x2, p[f"ln2w.{l}"].read(), mu2, rs2)
        grads[f"ln2w.{l}"] = _grad_tensor(state, (C,), dln2w)
        grads[f"ln2b.{l}"] = _grad_tensor(state, (C,), dln2b)

        dres2 = rt(dres3 + dres2_ln)

        atty = acts[f"atty.{l}"].read().reshape(Bsz * Tlen, C)
        datty, dattprojw, dattprojb = _matmul_grads(
            state, atty, p[f"attprojw.{l}"].read(),
            dres2.reshape(Bsz * Tlen, C))
        grads[f"attprojw.{l}"] = _grad_tensor(state, (C, C), dattprojw)
        grads[f"attprojb.{l}"] = _grad_tensor(state, (C,), dattprojb)
        datty = rt(datty.reshape(Bsz, Tlen, C))

        # attention backward
        qkv_v = acts[f"qkv.{l}"].read()
        q = qkv_v[:, :, :C].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        k = qkv_v[:, :, C:2 * C].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        v = qkv_v[:, :, 2 * C:].reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        att = acts[f"att.{l}"].read()

        dy_h = datty.reshape(Bsz, Tlen, NH, hs).transpose(0, 2, 1, 3)
        datt = rt(dy_h @ v.transpose(0, 1, 3, 2))
        dv = att.transpose(0, 1, 3, 2) @ dy_h
        dpre = att * (datt - (att * datt).sum(axis=-1, keepdims=True))
        dpre = rt(dpre / math.sqrt(hs))
        dq = dpre @ k
        dk = dpre.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([
            dq.transpose(0, 2, 1, 3).reshape(Bsz, Tlen, C),
            dk.transpose(0, 2, 1, 3).reshape(Bsz, Tlen, C),
            dv.transpose(0, 2, 1, 3).reshape(Bsz, Tlen, C),
        ], axis=-1)
        dqkv = rt(dqkv)

        ln1 = acts[f"ln1.{l}"].read().reshape(Bsz * Tlen, C)
        dln1, dqkvw, dqkvb = _matmul_grads(state, ln1, p[f"qkvw.{l}"].read(),
                                           dqkv.reshape(Bsz * Tlen, 3 * C))
        grads[f"qkvw.{l}"] = _grad_tensor(state, (3 * C, C), dqkvw)
        grads[f"qkvb.{l}"] = _grad_tensor(state, (3 * C,), dqkvb)
        dln1 = rt(dln1.reshape(Bsz, Tlen, C))

        mu1, rs1 = acts[f"ln1_stats.{l}"]
        x_in = (acts[f"res3.{l-1}"].read() if l > 0
                else acts["encoded"].read())
        dx_ln, dln1w, dln1b = T.layernorm_backward(
            dln1, x_in, p[f"ln1w.{l}"].read(), mu1, rs1)
        grads[f"ln1w.{l}"] = _grad_tensor(state, (C,), dln1w)
        grads[f"ln1b.{l}"] = _grad_tensor(state, (C,), dln1b)

        dx = rt(dres2 + dx_ln)

    dwte_emb, dwpe = T.embedding_backward(dx, tokens, V, cfg.max_seq_len)
    dwte_total = dwte_total + dwte_emb
    grads["wte"] = _grad_tensor(state, (V, C), dwte_total)
    grads["wpe"] = _grad_tensor(state, (cfg.max_seq_len, C), dwpe)

    return mean_loss, grads


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(state: ModelState, grads: dict[str, Tensor], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0, step: int = 1) -> None:
    """AdamW update; with a master copy the wide weights take the update and
    the containers are re-encoded from them."""
    b1, b2 = betas
    for key in state.params:
        g = grads[key].read().reshape(-1)
        m = b1 * state.adam_m[key].read().reshape(-1) + (1 - b1) * g
        v = b2 * state.adam_v[key].read().reshape(-1) + (1 - b2) * g * g
        state.adam_m[key].write(m)
        state.adam_v[key].write(v)
        m_hat = state.adam_m[key].read().reshape(-1) / (1 - b1 ** step)
        v_hat = state.adam_v[key].read().reshape(-1) / (1 - b2 ** step)
        if state.master is not None:
            theta = state.master[key].reshape(-1)
        else:
            theta = state.params[key].read().reshape(-1)
        update = lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
        new = theta - update
        if state.master is not None:
            state.master[key] = new.reshape(state.master[key].shape)
        state.params[key].write(new)


def train_step(state: ModelState, tokens, targets, lr: float, step: int,
               betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> float:
    _, acts = forward(state, tokens)
    loss, grads = loss_and_backward(state, acts, targets, iteration=step)
    adamw_step(state, grads, lr, betas, eps, weight_decay, step)
    return loss


# ---------------------------------------------------------------------------
# data and the finetune loop


def load_corpus(path) -> np.ndarray:
    """Byte-level tokens of a plain-text file."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus: {exc}") from exc
    if not data:
        raise DataError("corpus is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


class _Batches:
    """Deterministic sequential windows over the token stream, wrapping."""

    def __init__(self, tokens: np.ndarray, batch_size: int, seq_len: int):
        need = batch_size * seq_len + 1
        if tokens.size < need:
            reps = -(-need // tokens.size)
            tokens = np.tile(tokens, reps)
        self.tokens = tokens
        self.bs = batch_size
        self.tl = seq_len
        self.pos = 0

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        span = self.bs * self.tl
        if self.pos + span + 1 > self.tokens.size:
            self.pos = 0
        chunk = self.tokens[self.pos:self.pos + span + 1]
        x = chunk[:-1].reshape(self.bs, self.tl)
        y = chunk[1:].reshape(self.bs, self.tl)
        self.pos += span
        return x, y


def run_finetune(precision: PrecisionConfig | str, corpus, iters: int,
                 seed: int = 0, cfg: GPTConfig | None = None,
                 batch_size: int = 4, lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 initial_params: dict[str, np.ndarray] | None = None):
    """Train for a fixed number of iterations; returns [(iteration, loss)].

    Deterministic given the seed: the same preset, corpus and seed produce an
    identical loss curve.
    """
    if isinstance(precision, str):
        precision = preset(precision)
    if cfg is None:
        cfg = GPTConfig()
    tokens = corpus if isinstance(corpus, np.ndarray) else load_corpus(corpus)
    state = init_model(cfg, precision, seed)
    if initial_params is not None:
        set_params(state, initial_params)
    batches = _Batches(tokens, batch_size, cfg.max_seq_len)
    curve: list[tuple[int, float]] = []
    for it in range(1, iters + 1):
        x, y = batches.next()
        loss = train_step(state, x, y, lr, it, betas, eps, weight_decay)
        curve.append((it, loss))
    return curve, state


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("iteration,loss\n")
        for it, loss in rows:
            f.write(f"{it},{loss!r}\n")


# ---------------------------------------------------------------------------
# generation and evaluation


def generate(state: ModelState, prompt_tokens, n_tokens: int,
             temperature: float = 1.0, seed: int = 0) -> list[int]:
    """Ancestral sampling; temperature zero means greedy argmax decoding."""
    rng = np.random.default_rng(seed)
    cfg = state.config
    out = [int(t) for t in np.asarray(prompt_tokens).reshape(-1)]
    if not out:
        raise DataError("prompt must contain at least one token")
    for _ in range(n_tokens):
        ctx = np.asarray(out[-cfg.max_seq_len:], dtype=np.int64)
        logits, _ = forward(state, ctx[None, :])
        row = logits[0, -1]
        if temperature <= 0.0:
            nxt = int(np.argmax(row))
        else:
            z = (row - row.max()) / temperature
            probs = np.exp(z)
            probs /= probs.sum()
            nxt = int(rng.choice(cfg.vocab_size, p=probs))
        out.append(nxt)
    return out


def next_token_kl(state_p: ModelState, state_q: ModelState,
                  tokens: np.ndarray) -> float:
    """Mean KL(P || Q) between next-token distributions over a batch."""
    lp, _ = forward(state_p, tokens)
    lq, _ = forward(state_q, tokens)
    p = T.softmax_rows(lp, lp.max(axis=-1))
    q = T.softmax_rows(lq, lq.max(axis=-1))
    eps = 1e-12
    return float((p * (np.log(p + eps) - np.log(q + eps))).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# checkpoints (llm.c-compatible layout)

MAGIC_LLMC = 20240326   # header of the reference GPT-2 fp32 checkpoints
MAGIC_NATIVE = 20260808  # same layout, written by this package
_HEADER_INTS = 256
_MAX_PARAMS = 2_000_000_000  # refuse absurd headers before allocating


def save_checkpoint(state: ModelState, path, magic: int = MAGIC_NATIVE) -> None:
    cfg = state.config
    header = np.zeros(_HEADER_INTS, dtype="<i4")
    header[0] = magic
    header[1] = 3
    header[2] = cfg.max_seq_len
    header[3] = cfg.vocab_size
    header[4] = cfg.num_layers
    header[5] = cfg.num_heads
    header[6] = cfg.channels
    header[7] = cfg.vocab_size  # padded vocabulary equals the logical one
    with open(path, "wb") as f:
        f.write(header.tobytes())
        for key, _ in param_keys(cfg):
            if state.master is not None:
                vals = state.master[key]
            else:
                vals = state.params[key].read()
            f.write(vals.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (config, padded_vocab, wide parameter dict) from either magic."""
    try:
        with open(path, "rb") as f:
            raw = f.read(_HEADER_INTS * 4)
            if len(raw) != _HEADER_INTS * 4:
                raise DataError("checkpoint too short for a header")
            header = np.frombuffer(raw, dtype="<i4")
            if int(header[0]) not in (MAGIC_LLMC, MAGIC_NATIVE):
                raise DataError(f"bad checkpoint magic {int(header[0])}")
            if int(header[1]) != 3:
                raise DataError(f"unsupported checkpoint version {int(header[1])}")
            cfg = GPTConfig(max_seq_len=int(header[2]), vocab_size=int(header[3]),
                            num_layers=int(header[4]), num_heads=int(header[5]),
                            channels=int(header[6]))
            vp = int(header[7]) or cfg.vocab_size
            if vp < cfg.vocab_size:
                raise DataError("padded vocabulary smaller than the vocabulary")
            total = _total_params(cfg, vp)
            if total > _MAX_PARAMS:
                raise DataError(f"refusing a {total}-parameter checkpoint")
            body = np.frombuffer(f.read(), dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    if body.size != total:
        raise DataError(
            f"checkpoint has {body.size} parameter floats, expected {total}")
    values: dict[str, np.ndarray] = {}
    off = 0
    for key, name in param_keys(cfg):
        shape = _param_shape(name, cfg)
        if name == "wte":
            shape = (vp, cfg.channels)
        n = int(np.prod(shape))
        arr = body[off:off + n].astype(np.float64).reshape(shape)
        if name == "wte":
            arr = arr[:cfg.vocab_size]
        values[key] = arr
        off += n
    return cfg, vp, values


def _total_params(cfg: GPTConfig, vp: int) -> int:
    total = 0
    for _, name in param_keys(cfg):
        shape = _param_shape(name, cfg)
        if name == "wte":
            shape = (vp, cfg.channels)
        total += int(np.prod(shape))
    return total


def model_from_checkpoint(path, precision: PrecisionConfig | str) -> ModelState:
    """Instantiate a model from a checkpoint, quantizing into the preset."""
    if isinstance(precision, str):
        precision = preset(precision)
    cfg, _, values = load_checkpoint(path)
    state = init_model(cfg, precision, seed=0)
    set_params(state, values)
    return state
