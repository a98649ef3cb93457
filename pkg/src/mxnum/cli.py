"""Command-line front end.

Subcommands: ``inspect`` (format properties), ``quantize`` (block-quantize a
file of numbers and report scales/errors), ``bench-dot`` (time the block dot
product and measure its error against a wide oracle), ``compare-rounding``
(paired training runs differing only in rounding policy), ``train`` and
``generate``.

Every output CSV gets a sibling ``<name>.manifest.json`` recording the
command, configuration and seed that produced it, so artifacts are
reproducible.  Exit codes: 0 success, 2 usage error, 3 unusable input data,
4 numeric divergence (non-finite loss in the wide carrier).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .exact_acc import AccumulatorTooWide, ExactAccumulator, required_width
from .minifloat import (
    RoundingPolicy,
    WIDE_FORMAT_ID,
    encode,
    format_info,
    get_format,
)
from .mx import (
    AccumulatorKind,
    MxVector,
    dot_narrow_stats,
    mx_dot,
    mx_from_values,
    set_num_threads,
)
from . import train as tr

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_ACC = {"wide": AccumulatorKind.WIDE, "exact": AccumulatorKind.EXACT,
        "narrow": AccumulatorKind.NARROW}
_ROUNDING = {"nearest-away": RoundingPolicy.TIES_TO_AWAY,
             "nearest-even": RoundingPolicy.TIES_TO_EVEN,
             "truncate": RoundingPolicy.TRUNCATE}


@dataclasses.dataclass
class RunManifest:
    """Everything needed to reproduce one command's outputs."""

    command: str
    seed: int | None = None
    preset: str | None = None
    config: dict | None = None
    iterations: int | None = None
    corpus: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    format: str | None = None
    block: int | None = None
    acc: str | None = None
    rounding: str | None = None
    threads: int = 1
    extra: dict = dataclasses.field(default_factory=dict)
    version: str = __version__

    def write_for(self, artifact: Path) -> None:
        path = artifact.with_suffix(artifact.suffix + ".manifest.json")
        data = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _resolve_format(format_id: str):
    try:
        return get_format(format_id)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _out_dir(out: str | None) -> Path:
    path = Path(out) if out else Path(".")
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Microscaling numerics toolbox."""


# ---------------------------------------------------------------------------


@main.command("inspect")
@click.argument("format_id")
def cmd_inspect(format_id: str) -> None:
    """Print a format's properties and its exact-accumulator width."""
    if format_id.strip().lower() == WIDE_FORMAT_ID:
        click.echo("f32: native wide container (IEEE single precision storage)")
        click.echo("  exact accumulation is handled by the wide carrier")
        return
    spec = _resolve_format(format_id)
    fi = format_info(spec)
    width = required_width(spec)
    click.echo(f"format        {spec.name or format_id}")
    click.echo(f"exponent bits {spec.exp_bits}")
    click.echo(f"mantissa bits {spec.man_bits}")
    click.echo(f"bias          {spec.bias}")
    click.echo(f"xi_max        {fi.xi_max}")
    click.echo(f"xi_min        {fi.xi_min}")
    click.echo(f"max normal    {fi.max_normal!r}")
    click.echo(f"min normal    {fi.min_normal!r}")
    click.echo(f"min positive  {fi.min_positive!r}")
    click.echo(f"subnormals    {'enabled' if spec.denorm_enabled else 'disabled'}")
    click.echo(f"infinities    {'yes' if spec.has_infinity else 'no (saturating)'}")
    note = "" if width + 5 <= 63 else "  (exceeds the 64-bit register model)"
    click.echo(f"exact width   {width}{note}")


# ---------------------------------------------------------------------------


@main.command("quantize")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "format_id", default="e4m3", show_default=True)
@click.option("--block", default=32, show_default=True)
@click.option("--out", default=None, help="directory for report.csv + manifest")
def cmd_quantize(input_file: str, format_id: str, block: int, out: str | None) -> None:
    """Block-quantize a whitespace-separated file of numbers and report."""
    spec = _resolve_format(format_id)
    try:
        raw = Path(input_file).read_text().split()
        values = np.array([float(tok) for tok in raw], dtype=np.float64)
    except ValueError as exc:
        click.echo(f"error: not a numbers file: {exc}", err=True)
        raise SystemExit(EXIT_DATA)
    if values.size == 0:
        click.echo("error: input file holds no numbers", err=True)
        raise SystemExit(EXIT_DATA)

    vec = mx_from_values(values, block, spec)
    rec = vec.to_array()
    nan_in = np.isnan(values)
    err = np.where(nan_in | np.isnan(rec), 0.0, np.abs(values - rec))
    click.echo(vec.dump())
    rows = []
    for j in range(vec.blocks):
        lo, hi = j * block, min((j + 1) * block, values.size)
        blk_err = err[lo:hi]
        rows.append((j, vec.scale_exponent(j), float(blk_err.max()),
                     float(blk_err.mean())))
    click.echo(f"elements {values.size}  blocks {vec.blocks}")
    click.echo(f"max abs error  {float(err.max())!r}")
    click.echo(f"mean abs error {float(err.mean())!r}")
    if nan_in.any():
        click.echo(f"nan elements   {int(nan_in.sum())} (kept as element NaN codes)")
    if out is not None:
        out_path = _out_dir(out) / "report.csv"
        with open(out_path, "w") as f:
            f.write("block,w,max_abs_err,mean_abs_err\n")
            for j, w, mx_e, mn_e in rows:
                f.write(f"{j},{w},{mx_e!r},{mn_e!r}\n")
        RunManifest("quantize", format=format_id, block=block,
                    out=str(out_path),
                    extra={"input": str(input_file)}).write_for(out_path)
        click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------


@main.command("bench-dot")
@click.option("--n", default=4096, show_default=True)
@click.option("--block", default=32, show_default=True)
@click.option("--format", "format_id", default="e4m3", show_default=True)
@click.option("--acc", type=click.Choice(list(_ACC)), default="wide", show_default=True)
@click.option("--trials", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--adversarial", is_flag=True,
              help="blocks of paired same-sign top-binade elements")
@click.option("--threads", default=1, show_default=True)
def cmd_bench_dot(n: int, block: int, format_id: str, acc: str, trials: int,
                  seed: int, adversarial: bool, threads: int) -> None:
    """Time the block dot product and report its error against a wide oracle."""
    set_num_threads(threads)
    spec = _resolve_format(format_id)
    kind = _ACC[acc]
    if kind is AccumulatorKind.EXACT:
        try:
            ExactAccumulator(spec, block)
        except AccumulatorTooWide as exc:
            raise click.UsageError(f"--acc exact with {format_id}: {exc}") from exc
    if n == 0:
        click.echo("n=0: time 0.0 s, error 0.0, overflows 0")
        return
    rng = np.random.default_rng(seed)
    if adversarial:
        # two same-sign top-binade elements per block against unscaled ones:
        # the products land at the format's top binade and their narrow sum
        # cannot be represented
        top = spec.max_normal
        xs = np.zeros(n)
        xs[0::block] = top
        if n > 1:
            xs[1::block] = top
        one = np.uint16(encode(1.0, spec))
        codes = np.zeros(n, dtype=np.uint16)
        codes[0::block] = one
        if n > 1:
            codes[1::block] = one
        a = mx_from_values(xs, block, spec)
        b = MxVector.from_raw(codes, np.zeros(-(-n // block), dtype=np.int8),
                              spec, block)
    else:
        a = mx_from_values(rng.standard_normal(n), block, spec)
        b = mx_from_values(rng.standard_normal(n), block, spec)

    oracle = float(np.dot(a.to_array(), b.to_array()))
    t0 = time.perf_counter()
    result = 0.0
    for _ in range(max(trials, 1)):
        result = mx_dot(a, b, kind)
    dt = (time.perf_counter() - t0) / max(trials, 1)
    _, overflows = dot_narrow_stats(a, b) if kind is AccumulatorKind.NARROW else (None, 0)
    err = abs(result - oracle)
    rel = err / abs(oracle) if oracle else 0.0
    click.echo(f"n {n}  block {block}  format {format_id}  acc {acc}")
    click.echo(f"time per dot   {dt:.6g} s")
    click.echo(f"result         {result!r}")
    click.echo(f"oracle (wide)  {oracle!r}")
    click.echo(f"abs error      {err!r}  rel {rel:.3g}")
    if kind is AccumulatorKind.NARROW:
        click.echo(f"overflowed blocks {overflows}")


# ---------------------------------------------------------------------------


def _load_corpus_or_exit(corpus: str) -> np.ndarray:
    try:
        return tr.load_corpus(corpus)
    except tr.DataError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_DATA)


@main.command("compare-rounding")
@click.option("--iters", default=100, show_default=True)
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--preset", "preset_name", default="A", show_default=True,
              help="precision preset to run under both policies")
@click.option("--out", default=".", show_default=True)
@click.option("--threads", default=1, show_default=True)
def cmd_compare_rounding(iters: int, corpus: str, seed: int,
                         preset_name: str, out: str, threads: int) -> None:
    """Paired runs differing only in rounding policy (truncate vs to-nearest)."""
    set_num_threads(threads)
    tokens = _load_corpus_or_exit(corpus)
    curves = {}
    try:
        for label, policy in (("truncate", RoundingPolicy.TRUNCATE),
                              ("to-nearest", RoundingPolicy.TIES_TO_AWAY)):
            cfg = tr.preset(preset_name, rounding=policy)
            curve, _ = tr.run_finetune(cfg, tokens, iters, seed=seed)
            curves[label] = curve
    except tr.NonFiniteLoss as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_DIVERGED)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc

    out_path = _out_dir(out) / "loss-trunc-vs-round.csv"
    with open(out_path, "w") as f:
        f.write("iteration,truncate,to-nearest\n")
        for (it, lt), (_, ln) in zip(curves["truncate"], curves["to-nearest"]):
            f.write(f"{it},{lt!r},{ln!r}\n")
    RunManifest("compare-rounding", seed=seed, preset=preset_name,
                iterations=iters, corpus=str(corpus),
                out=str(out_path), threads=threads).write_for(out_path)

    mean_t = (sum(l for _, l in curves["truncate"]) / iters) if iters else math.nan
    mean_n = (sum(l for _, l in curves["to-nearest"]) / iters) if iters else math.nan
    click.echo(f"mean loss truncate   {mean_t!r}")
    click.echo(f"mean loss to-nearest {mean_n!r}")
    if iters:
        verdict = "PASS" if mean_n < mean_t else "FAIL"
        click.echo(f"direction (to-nearest < truncate): {verdict}")
    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------


@main.command("train")
@click.option("--preset", "preset_name", default="baseline", show_default=True)
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--iters", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=".", show_default=True)
@click.option("--rounding", type=click.Choice(list(_ROUNDING)), default=None,
              help="override the preset's rounding policy")
@click.option("--acc", type=click.Choice(list(_ACC)), default=None,
              help="override the preset's matmul accumulator")
@click.option("--block", default=None, type=int,
              help="override the preset's MX block length")
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False),
              help="initial weights (llm.c-style or native)")
@click.option("--threads", default=1, show_default=True)
def cmd_train(preset_name: str, corpus: str, iters: int, seed: int, out: str,
              rounding: str | None, acc: str | None, block: int | None,
              checkpoint: str | None, threads: int) -> None:
    """Fine-tune the desk-scale model and write the loss curve."""
    set_num_threads(threads)
    try:
        cfg = tr.preset(preset_name,
                        rounding=_ROUNDING[rounding] if rounding else None,
                        accumulator=_ACC[acc] if acc else None)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    if block is not None:
        cfg = _override_block(cfg, block)
    if cfg.accumulator is AccumulatorKind.EXACT and cfg.matmul_spec is not None:
        try:
            ExactAccumulator(cfg.matmul_spec, cfg.matmul_block)
        except AccumulatorTooWide as exc:
            raise click.UsageError(
                f"--acc exact with {cfg.matmul_spec.name}: {exc}") from exc
    if cfg.accumulator is AccumulatorKind.NARROW:
        raise click.UsageError("the narrow accumulator is a demonstration mode; "
                               "train with wide or exact")

    tokens = _load_corpus_or_exit(corpus)
    model_cfg = tr.GPTConfig()
    initial = None
    if checkpoint:
        try:
            model_cfg, _, initial = tr.load_checkpoint(checkpoint)
        except tr.DataError as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(EXIT_DATA)

    try:
        curve, state = tr.run_finetune(cfg, tokens, iters, seed=seed,
                                       cfg=model_cfg, initial_params=initial)
    except tr.NonFiniteLoss as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_DIVERGED)

    out_dir = _out_dir(out)
    csv_path = out_dir / "loss.csv"
    tr.write_loss_csv(curve, csv_path)
    ckpt_path = out_dir / "model.bin"
    tr.save_checkpoint(state, ckpt_path)
    RunManifest("train", seed=seed, preset=cfg.name, config=cfg.describe(),
                iterations=iters, corpus=str(corpus), out=str(out_dir),
                checkpoint=checkpoint, rounding=rounding, acc=acc,
                block=block, threads=threads).write_for(csv_path)
    if curve:
        click.echo(f"final loss {curve[-1][1]!r} after {iters} iterations")
    click.echo(f"wrote {csv_path} and {ckpt_path}")


def _override_block(cfg: tr.PrecisionConfig, block: int) -> tr.PrecisionConfig:
    def fix(cs):
        return dataclasses.replace(cs, block=block) if cs.kind == "mx" else cs

    return dataclasses.replace(
        cfg, weights=fix(cfg.weights), activations=fix(cfg.activations),
        gradients=fix(cfg.gradients), adam_buffers=fix(cfg.adam_buffers),
        matmul_block=block)


# ---------------------------------------------------------------------------


@main.command("generate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", default="The ", show_default=True)
@click.option("--n-tokens", default=64, show_default=True)
@click.option("--temperature", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--preset", "preset_name", default="baseline", show_default=True,
              help="quantize the loaded weights into this preset")
@click.option("--out", default=".", show_default=True)
@click.option("--threads", default=1, show_default=True)
def cmd_generate(checkpoint: str, prompt: str, n_tokens: int, temperature: float,
                 seed: int, preset_name: str, out: str, threads: int) -> None:
    """Sample tokens from a checkpoint (byte-level vocabulary)."""
    set_num_threads(threads)
    try:
        cfg = tr.preset(preset_name)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        state = tr.model_from_checkpoint(checkpoint, cfg)
    except tr.DataError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_DATA)
    prompt_tokens = list(prompt.encode("utf-8", errors="replace"))
    if not prompt_tokens:
        raise click.UsageError("prompt must not be empty")
    if max(prompt_tokens) >= state.config.vocab_size:
        click.echo("error: prompt contains bytes outside the vocabulary", err=True)
        raise SystemExit(EXIT_DATA)
    tokens = tr.generate(state, prompt_tokens, n_tokens, temperature, seed)

    out_dir = _out_dir(out)
    csv_path = out_dir / "tokens.csv"
    with open(csv_path, "w") as f:
        f.write("position,token\n")
        for i, t in enumerate(tokens):
            f.write(f"{i},{t}\n")
    text = bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")
    (out_dir / "generated.txt").write_text(text)
    RunManifest("generate", seed=seed, preset=preset_name,
                checkpoint=str(checkpoint), out=str(out_dir), threads=threads,
                extra={"prompt": prompt, "n_tokens": n_tokens,
                       "temperature": temperature}).write_for(csv_path)
    click.echo(text)
    click.echo(f"wrote {csv_path}")


@main.command("presets")
def cmd_presets() -> None:
    """List the named precision configurations."""
    for name in tr.PRESET_NAMES:
        cfg = tr.preset(name)
        click.echo(f"{name:9s} {json.dumps(cfg.describe(), sort_keys=True)}")


if __name__ == "__main__":
    main()
