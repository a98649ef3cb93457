"""Command-line interface: outputs, exit codes, manifests, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from mxnum.cli import main
from mxnum.train import MAGIC_NATIVE


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    from conftest import make_corpus_text

    path = tmp_path_factory.mktemp("cli") / "corpus.txt"
    path.write_text(make_corpus_text(4000))
    return str(path)


class TestInspect:
    def test_e4m3_row(self, runner):
        res = runner.invoke(main, ["inspect", "e4m3"])
        assert res.exit_code == 0
        assert "xi_max        8" in res.output
        assert "exact width   43" in res.output

    def test_e3m4_row(self, runner):
        res = runner.invoke(main, ["inspect", "e3m4"])
        assert res.exit_code == 0
        assert "xi_min        -4" in res.output

    def test_e5m2_width_flagged(self, runner):
        res = runner.invoke(main, ["inspect", "e5m2"])
        assert "exact width   69" in res.output
        assert "exceeds" in res.output

    def test_wide_format(self, runner):
        res = runner.invoke(main, ["inspect", "f32"])
        assert res.exit_code == 0

    def test_unknown_format_is_usage_error(self, runner):
        res = runner.invoke(main, ["inspect", "nonsense"])
        assert res.exit_code == 2


class TestQuantize:
    def test_all_zero_file(self, runner, tmp_path):
        path = tmp_path / "zeros.txt"
        path.write_text("0 0 0 0 0 0 0 0")
        res = runner.invoke(main, ["quantize", str(path), "--block", "4"])
        assert res.exit_code == 0
        assert "w=0" in res.output
        assert "max abs error  0.0" in res.output

    def test_worked_example(self, runner, tmp_path):
        path = tmp_path / "vals.txt"
        path.write_text("1.0 0.5 -2.0 0.25")
        res = runner.invoke(main, ["quantize", str(path), "--block", "4"])
        assert "block 0: w=-7 codes=70 68 f8 60" in res.output

    def test_nan_elements_flagged(self, runner, tmp_path):
        path = tmp_path / "vals.txt"
        path.write_text("1.0 nan 2.0")
        res = runner.invoke(main, ["quantize", str(path), "--block", "4"])
        assert res.exit_code == 0
        assert "nan elements   1" in res.output

    def test_garbage_file_is_data_error(self, runner, tmp_path):
        path = tmp_path / "vals.txt"
        path.write_text("hello world")
        res = runner.invoke(main, ["quantize", str(path)])
        assert res.exit_code == 3

    def test_report_and_manifest_written(self, runner, tmp_path):
        path = tmp_path / "vals.txt"
        path.write_text("1 2 3 4 5 6 7 8 9")
        out = tmp_path / "rep"
        res = runner.invoke(main, ["quantize", str(path), "--out", str(out)])
        assert res.exit_code == 0
        assert (out / "report.csv").exists()
        manifest = json.loads((out / "report.csv.manifest.json").read_text())
        assert manifest["command"] == "quantize"


class TestBenchDot:
    def test_zero_length(self, runner):
        res = runner.invoke(main, ["bench-dot", "--n", "0"])
        assert res.exit_code == 0
        assert "time 0.0 s, error 0.0" in res.output

    def test_exact_error_is_zero_at_this_scale(self, runner):
        # the one final rounding of the exact path lands on the oracle value
        res = runner.invoke(main, ["bench-dot", "--n", "256", "--acc", "exact",
                                   "--trials", "2"])
        assert res.exit_code == 0
        assert "abs error      0.0" in res.output

    def test_adversarial_narrow_overflows(self, runner):
        res = runner.invoke(main, ["bench-dot", "--n", "128", "--format", "e5m2",
                                   "--acc", "narrow", "--trials", "1",
                                   "--adversarial"])
        assert res.exit_code == 0
        line = [l for l in res.output.splitlines() if "overflowed" in l][0]
        assert int(line.split()[-1]) > 0

    def test_exact_with_e5m2_rejected(self, runner):
        res = runner.invoke(main, ["bench-dot", "--format", "e5m2",
                                   "--acc", "exact"])
        assert res.exit_code == 2
        assert "69" in res.output


class TestTrain:
    def test_writes_csv_checkpoint_manifest(self, runner, small_corpus, tmp_path):
        out = tmp_path / "run"
        res = runner.invoke(main, ["train", "--preset", "baseline",
                                   "--corpus", small_corpus, "--iters", "3",
                                   "--seed", "1", "--out", str(out)])
        assert res.exit_code == 0, res.output
        csv = (out / "loss.csv").read_text().splitlines()
        assert csv[0] == "iteration,loss"
        assert len(csv) == 4
        manifest = json.loads((out / "loss.csv.manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["iterations"] == 3
        header = np.fromfile(out / "model.bin", dtype="<i4", count=2)
        assert header[0] == MAGIC_NATIVE and header[1] == 3

    def test_unknown_preset_usage_error(self, runner, small_corpus):
        res = runner.invoke(main, ["train", "--preset", "Q",
                                   "--corpus", small_corpus])
        assert res.exit_code == 2

    def test_missing_corpus_usage_error(self, runner):
        res = runner.invoke(main, ["train", "--corpus", "/no/such/file",
                                   "--iters", "1"])
        assert res.exit_code == 2

    def test_narrow_accumulator_rejected(self, runner, small_corpus):
        res = runner.invoke(main, ["train", "--corpus", small_corpus,
                                   "--acc", "narrow"])
        assert res.exit_code == 2

    def test_byte_identical_reruns(self, runner, small_corpus, tmp_path):
        args = ["--preset", "A", "--corpus", small_corpus, "--iters", "3",
                "--seed", "5"]
        r1 = runner.invoke(main, ["train", *args, "--out", str(tmp_path / "a")])
        r2 = runner.invoke(main, ["train", *args, "--out", str(tmp_path / "b")])
        assert r1.exit_code == r2.exit_code == 0
        a = (tmp_path / "a" / "loss.csv").read_bytes()
        b = (tmp_path / "b" / "loss.csv").read_bytes()
        assert a == b

    def test_rounding_override_changes_curve(self, runner, small_corpus, tmp_path):
        base = ["train", "--preset", "A", "--corpus", small_corpus,
                "--iters", "3", "--seed", "5"]
        r1 = runner.invoke(main, [*base, "--out", str(tmp_path / "n")])
        r2 = runner.invoke(main, [*base, "--rounding", "truncate",
                                  "--out", str(tmp_path / "t")])
        assert r1.exit_code == r2.exit_code == 0
        assert ((tmp_path / "n" / "loss.csv").read_text()
                != (tmp_path / "t" / "loss.csv").read_text())

    def test_threads_do_not_change_results(self, runner, small_corpus, tmp_path):
        base = ["train", "--preset", "F", "--corpus", small_corpus,
                "--iters", "2", "--seed", "2"]
        r1 = runner.invoke(main, [*base, "--out", str(tmp_path / "t1")])
        r2 = runner.invoke(main, [*base, "--threads", "4",
                                  "--out", str(tmp_path / "t4")])
        assert r1.exit_code == r2.exit_code == 0
        assert ((tmp_path / "t1" / "loss.csv").read_bytes()
                == (tmp_path / "t4" / "loss.csv").read_bytes())

    def test_diverged_run_exits_4(self, runner, small_corpus, monkeypatch):
        import mxnum.cli as cli_mod
        from mxnum.train import NonFiniteLoss

        def boom(*a, **kw):
            raise NonFiniteLoss("wide-precision loss is nan at iteration 2",
                                iteration=2)

        monkeypatch.setattr(cli_mod.tr, "run_finetune", boom)
        res = runner.invoke(main, ["train", "--corpus", small_corpus,
                                   "--iters", "5"])
        assert res.exit_code == 4
        assert "iteration 2" in res.output


class TestCompareRounding:
    def test_csv_columns_and_direction(self, runner, small_corpus, tmp_path):
        res = runner.invoke(main, ["compare-rounding", "--iters", "2",
                                   "--corpus", small_corpus,
                                   "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "loss-trunc-vs-round.csv").read_text().splitlines()
        assert lines[0] == "iteration,truncate,to-nearest"
        assert len(lines) == 3

    def test_single_iteration(self, runner, small_corpus, tmp_path):
        res = runner.invoke(main, ["compare-rounding", "--iters", "1",
                                   "--corpus", small_corpus,
                                   "--out", str(tmp_path)])
        assert res.exit_code == 0
        lines = (tmp_path / "loss-trunc-vs-round.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_identical_policies_identical_curves(self, runner, small_corpus,
                                                 tmp_path):
        # determinism: the same preset+seed+policy reproduces its own curve,
        # so a same-policy pairing would be two identical columns
        out1 = tmp_path / "x"
        out2 = tmp_path / "y"
        args = ["compare-rounding", "--iters", "2", "--corpus", small_corpus,
                "--seed", "3"]
        r1 = runner.invoke(main, [*args, "--out", str(out1)])
        r2 = runner.invoke(main, [*args, "--out", str(out2)])
        assert r1.exit_code == r2.exit_code == 0
        assert ((out1 / "loss-trunc-vs-round.csv").read_bytes()
                == (out2 / "loss-trunc-vs-round.csv").read_bytes())


class TestGenerate:
    @pytest.fixture()
    def checkpoint(self, runner, small_corpus, tmp_path):
        out = tmp_path / "train"
        res = runner.invoke(main, ["train", "--preset", "baseline",
                                   "--corpus", small_corpus, "--iters", "5",
                                   "--out", str(out)])
        assert res.exit_code == 0
        return str(out / "model.bin")

    def test_generates_tokens_and_manifest(self, runner, checkpoint, tmp_path):
        out = tmp_path / "gen"
        res = runner.invoke(main, ["generate", "--checkpoint", checkpoint,
                                   "--prompt", "the ", "--n-tokens", "8",
                                   "--temperature", "0", "--out", str(out)])
        assert res.exit_code == 0, res.output
        lines = (out / "tokens.csv").read_text().splitlines()
        assert lines[0] == "position,token"
        assert len(lines) == 1 + 4 + 8  # prompt bytes + sampled
        assert (out / "tokens.csv.manifest.json").exists()
        assert (out / "generated.txt").exists()

    def test_deterministic_per_seed(self, runner, checkpoint, tmp_path):
        argv = ["generate", "--checkpoint", checkpoint, "--prompt", "ab",
                "--n-tokens", "6", "--seed", "9"]
        r1 = runner.invoke(main, [*argv, "--out", str(tmp_path / "g1")])
        r2 = runner.invoke(main, [*argv, "--out", str(tmp_path / "g2")])
        assert ((tmp_path / "g1" / "tokens.csv").read_bytes()
                == (tmp_path / "g2" / "tokens.csv").read_bytes())

    def test_bad_checkpoint_is_data_error(self, runner, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\x00" * 2048)
        res = runner.invoke(main, ["generate", "--checkpoint", str(bad)])
        assert res.exit_code == 3


class TestPresetsCommand:
    def test_lists_exactly_the_ten(self, runner):
        res = runner.invoke(main, ["presets"])
        names = [line.split()[0] for line in res.output.splitlines()]
        assert names == ["baseline", "A", "B", "C", "D", "D'", "E", "F", "F'", "G"]
