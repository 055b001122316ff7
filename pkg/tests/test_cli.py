import json
import re
import subprocess
import sys

import pytest

from aia.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

SMALL_TRAIN = """\
# tiny run for the CLI tests
epochs: 2
batch_size: 10
n_train: 30
n_val: 10
frames: 4
height: 16
width: 16
square: 4
channels: [4, 4, 8]
lr: 0.01
seed: 3
"""


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestAudit:
    def test_plain_totals(self, capsys):
        code, out, err = run(capsys, "audit", "--backbone", "tsn", "--frames", "8", "--crop", "224",
                             "--classes", "174", "--attention", "none")
        assert code == EXIT_OK
        assert "(23.86M / 32.88G)" in out.splitlines()[-1]
        assert err.startswith("config audit: ")

    def test_two_stage_totals(self, capsys):
        code, out, _ = run(capsys, "audit", "--attention", "cinst_stinc_seq", "--format", "json")
        totals = json.loads(out)["totals"]
        assert (totals["params_rounded"], totals["flops_rounded"]) == ("23.87M", "33.15G")

    def test_table_label_accepted(self, capsys):
        code, out, _ = run(capsys, "audit", "--attention", "CinST->STinC", "--format", "csv")
        assert code == EXIT_OK and out.splitlines()[-1] == "total,23871726,33147491968"

    def test_unknown_variant_lists_names(self, capsys):
        code, out, err = run(capsys, "audit", "--attention", "fancy")
        assert code == EXIT_USAGE and out == ""
        assert "cinst_stinc_par" in err and "cbam3d_377" in err

    @pytest.mark.parametrize("argv", [["audit", "--frames"], ["audit", "--frames", "0"], ["audit", "--bogus"],
                                      ["audit", "--width", "half"], ["frobnicate"], []])
    def test_malformed_flags(self, capsys, argv):
        code, out, _ = run(capsys, *argv)
        assert code == EXIT_USAGE and out == ""

    def test_out_file_is_deterministic(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(capsys, "audit", "--attention", "st", "--format", "csv", "--out", str(a))[0] == EXIT_OK
        assert run(capsys, "audit", "--attention", "st", "--format", "csv", "--out", str(b))[0] == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_spec_file(self, capsys, tmp_path):
        spec = tmp_path / "net.yaml"
        spec.write_text("name: tiny\nframes: 2\ncrop: 5\nin_channels: 3\nclasses: 2\nlayers:\n"
                        "  - {type: Conv, name: conv, c_in: 3, c_out: 4, bias: true}\n"
                        "  - {type: GlobalAvgPool, name: pool}\n"
                        "  - {type: Linear, name: fc, c_in: 4, c_out: 2}\n")
        code, out, _ = run(capsys, "audit", "--spec", str(spec), "--format", "csv", "--convention", "mac")
        assert code == EXIT_OK and out.splitlines()[-1] == "total,122,5416"

    def test_bad_spec_file(self, capsys, tmp_path):
        spec = tmp_path / "bad.yaml"
        spec.write_text("name: x\nframes: 1\ncrop: 4\nin_channels: 3\nclasses: 1\nlayers:\n"
                        "  - {type: Conv, name: a, c_in: 5, c_out: 2}\n")
        code, out, err = run(capsys, "audit", "--spec", str(spec))
        assert code == EXIT_USAGE and out == "" and "expects 5 channels" in err

    def test_missing_spec_file(self, capsys, tmp_path):
        assert run(capsys, "audit", "--spec", str(tmp_path / "nope.yaml"))[0] == EXIT_USAGE


class TestGradcheck:
    def test_sigmoid_tight(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--module", "sigmoid")
        assert code == EXIT_OK
        err = float(re.search(r"max relative error (\S+)", out).group(1))
        assert err < 1e-8

    def test_module_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--module", "cinst_stinc_seq", "--tol", "1e-5",
                           "--max-param-entries", "6")
        assert code == EXIT_OK and out.rstrip().endswith("PASS")

    def test_zero_tolerance_always_fails(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--module", "relu", "--tol", "0")
        assert code == EXIT_FAIL and out.rstrip().endswith("FAIL")

    def test_unknown_module(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--module", "softmax")
        assert code == EXIT_USAGE and "valid names" in err and out == ""

    def test_bad_size(self, capsys):
        assert run(capsys, "gradcheck", "--module", "relu", "--size", "1,2")[0] == EXIT_USAGE


class TestTrain:
    def test_metrics_files_identical_across_runs(self, capsys, tmp_path):
        cfg = tmp_path / "train.yaml"
        cfg.write_text(SMALL_TRAIN)
        outs = []
        for name in ("a", "b"):
            metrics = tmp_path / f"{name}.csv"
            code, out, err = run(capsys, "train", "--config", str(cfg), "--variant", "c", "--metrics-out",
                                 str(metrics))
            assert code == EXIT_OK
            outs.append((metrics.read_bytes(), metrics.with_suffix(".json").read_bytes(), out))
        assert outs[0] == outs[1]
        lines = outs[0][0].decode().splitlines()
        assert lines[0] == "epoch,train_loss,val_top1" and len(lines) == 3
        summary = json.loads(outs[0][1])
        assert summary["variant"] == "c" and summary["seed"] == 3 and summary["epochs"] == 2

    def test_seed_override(self, capsys, tmp_path):
        cfg = tmp_path / "train.yaml"
        cfg.write_text(SMALL_TRAIN.replace("epochs: 2", "epochs: 1"))
        code, out, _ = run(capsys, "train", "--config", str(cfg), "--variant", "plain", "--seed", "11")
        assert code == EXIT_OK and '"seed": 11' in out

    def test_config_error_has_line(self, capsys, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("epochs: 2\nlearning_rate: 0.1\n")
        code, out, err = run(capsys, "train", "--config", str(cfg))
        assert code == EXIT_USAGE and f"{cfg}:2:" in err and out == ""

    def test_unknown_variant(self, capsys, tmp_path):
        cfg = tmp_path / "train.yaml"
        cfg.write_text(SMALL_TRAIN)
        assert run(capsys, "train", "--config", str(cfg), "--variant", "nope")[0] == EXIT_USAGE


class TestBenchAndOracle:
    def test_bench_single_iteration(self, capsys):
        code, out, _ = run(capsys, "bench", "--module", "c", "--iters", "1")
        assert code == EXIT_OK and "over 1 iters" in out

    def test_bench_unknown(self, capsys):
        assert run(capsys, "bench", "--module", "nope")[0] == EXIT_USAGE

    def test_oracle_conv3(self, capsys):
        code, out, _ = run(capsys, "oracle", "--op", "conv3", "--seed", "1")
        assert code == EXIT_OK
        assert float(re.search(r"deviation (\S+)", out).group(1)) < 1e-9

    def test_oracle_zero_is_exact(self, capsys):
        code, out, _ = run(capsys, "oracle", "--op", "cinst_stinc_seq", "--zero")
        assert code == EXIT_OK and "deviation 0.000e+00" in out

    def test_oracle_unknown(self, capsys):
        code, out, err = run(capsys, "oracle", "--op", "fft")
        assert code == EXIT_USAGE and "valid names" in err

    def test_oracle_output_deterministic(self, capsys):
        assert run(capsys, "oracle", "--op", "pool")[1] == run(capsys, "oracle", "--op", "pool")[1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "aia", "audit", "--attention", "c", "--format", "csv"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[-1].startswith("total,23865454,")
    assert proc.stderr.startswith("config audit:")
