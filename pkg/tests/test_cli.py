"""End-to-end checks of the command-line interface.

Everything drives sqil.cli.main with argv lists so exit codes and
stdout/stderr are observable without spawning subprocesses.
"""

import json
import re

import numpy as np
import pytest

from sqil.cli import main
from sqil.formats import read_checkpoint, read_sis
from sqil.quant import FakeQuantPolicy


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


FAST_TRAIN = ["--hidden", "8", "--epochs", "1", "--batch-size", "64"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny but complete run directory: dataset, fp, ptq, sqil."""
    d = tmp_path_factory.mktemp("cli_run")
    data = str(d / "data.bin")
    fp = str(d / "fp.ckpt")
    assert main(["gen-data", "--episodes", "2", "--seed", "0", "--out", data]) == 0
    assert main(["train-fp", "--data", data, "--out", fp, *FAST_TRAIN]) == 0
    assert (
        main(["ptq", "--data", data, "--policy", fp, "--out", str(d / "ptq.ckpt"), *FAST_TRAIN])
        == 0
    )
    assert (
        main(
            [
                "train",
                "sqil",
                "--data",
                data,
                "--policy",
                fp,
                "--out",
                str(d / "sqil.ckpt"),
                *FAST_TRAIN,
            ]
        )
        == 0
    )
    return d


def test_no_subcommand_is_a_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 2
    assert err.startswith("usage:")


def test_unknown_flag_is_a_usage_error(capsys):
    code, _, err = run(capsys, "gen-data", "--bogus", "1")
    assert code == 2
    assert err.startswith("usage:")


def test_missing_required_option_is_a_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--episodes", "1")
    assert code == 2
    assert "--out" in err


def test_missing_input_file_is_an_io_error(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--policy", str(tmp_path / "nope.ckpt"))
    assert code == 4
    assert err.startswith("io:")


def test_numeric_blowup_exits_3(capsys, workdir):
    # subnormal sigma^2 turns the loss scale into inf on the first step
    with np.errstate(all="ignore"):
        code, _, err = run(
            capsys,
            "train-fp",
            "--data",
            str(workdir / "data.bin"),
            "--out",
            str(workdir / "junk.ckpt"),
            "--action-sigma",
            "4e-155",
            *FAST_TRAIN,
        )
    assert code == 3
    assert err.startswith("numeric:")


def test_gen_data_is_deterministic(capsys, tmp_path):
    hashes = []
    for name in ("a.bin", "b.bin"):
        code, out, _ = run(
            capsys, "gen-data", "--episodes", "2", "--seed", "7", "--out", str(tmp_path / name)
        )
        assert code == 0
        hashes.append(re.search(r"sha256=([0-9a-f]{64})", out).group(1))
    assert hashes[0] == hashes[1]


def test_resolved_config_written_beside_output(capsys, tmp_path):
    out = tmp_path / "d.bin"
    code, _, _ = run(capsys, "gen-data", "--episodes", "1", "--out", str(out))
    assert code == 0
    cfg = json.loads((tmp_path / "d.bin.config.json").read_text())
    assert cfg["episodes"] == 1
    assert cfg["env"] == "pickplace"
    assert cfg["seed"] == 0


def test_config_file_applies_and_flags_override(capsys, tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"episodes": 1, "seed": 3}))
    out = tmp_path / "d.bin"
    code, _, _ = run(
        capsys, "gen-data", "--config", str(cfg_path), "--seed", "5", "--out", str(out)
    )
    assert code == 0
    resolved = json.loads((tmp_path / "d.bin.config.json").read_text())
    assert resolved["episodes"] == 1  # from the file
    assert resolved["seed"] == 5  # flag wins


def test_unknown_config_key_is_rejected(capsys, tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"episodess": 1}))
    code, _, err = run(
        capsys, "gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d.bin")
    )
    assert code == 2
    assert "unknown config keys: episodess" in err


def test_malformed_config_is_a_usage_error(capsys, tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text("{not json")
    code, _, err = run(
        capsys, "gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d.bin")
    )
    assert code == 2
    assert "not valid JSON" in err


def test_train_arms_produce_quantized_checkpoints(workdir):
    for name in ("ptq.ckpt", "sqil.ckpt"):
        policy = read_checkpoint(str(workdir / name))
        assert isinstance(policy, FakeQuantPolicy)


def test_train_warns_when_sis_missing(capsys, workdir, tmp_path):
    code, _, err = run(
        capsys,
        "train",
        "qrd",
        "--data",
        str(workdir / "data.bin"),
        "--policy",
        str(workdir / "fp.ckpt"),
        "--out",
        str(tmp_path / "qrd.ckpt"),
        *FAST_TRAIN,
    )
    assert code == 0
    assert "no SIS cache" in err


def test_sis_command_writes_thresholded_table(capsys, workdir, tmp_path):
    out = tmp_path / "table.sis"
    code, stdout, _ = run(
        capsys,
        "sis",
        "--data",
        str(workdir / "data.bin"),
        "--policy",
        str(workdir / "fp.ckpt"),
        "--out",
        str(out),
        "--p",
        "0.25",
        "--beta",
        "3.0",
    )
    assert code == 0
    table = read_sis(str(out))
    assert table.p == 0.25
    assert table.beta == 3.0
    assert table.flags is not None
    assert "flagged_fraction=" in stdout


def test_train_accepts_precomputed_sis(capsys, workdir, tmp_path):
    table_path = tmp_path / "table.sis"
    assert (
        main(
            [
                "sis",
                "--data",
                str(workdir / "data.bin"),
                "--policy",
                str(workdir / "fp.ckpt"),
                "--out",
                str(table_path),
            ]
        )
        == 0
    )
    capsys.readouterr()
    code, _, err = run(
        capsys,
        "train",
        "sqil",
        "--data",
        str(workdir / "data.bin"),
        "--policy",
        str(workdir / "fp.ckpt"),
        "--sis",
        str(table_path),
        "--out",
        str(tmp_path / "s2.ckpt"),
        *FAST_TRAIN,
    )
    assert code == 0
    assert "no SIS cache" not in err


def test_eval_prints_json_report(capsys, workdir, tmp_path):
    out = tmp_path / "report.json"
    code, stdout, _ = run(
        capsys,
        "eval",
        "--policy",
        str(workdir / "fp.ckpt"),
        "--arm",
        "fp",
        "--episodes",
        "2",
        "--rounds",
        "1",
        "--out",
        str(out),
    )
    assert code == 0
    rep = json.loads(stdout)
    assert rep["arm"] == "fp"
    assert rep["episodes"] == 2
    assert rep["rounds"] == 1
    assert 0.0 <= rep["success_rate"] <= 100.0
    assert json.loads(out.read_text()) == rep


def test_discrepancy_writes_csv_and_plot(capsys, workdir, tmp_path):
    out = tmp_path / "gap.csv"
    code, stdout, _ = run(
        capsys,
        "discrepancy",
        "--policy",
        str(workdir / "ptq.ckpt"),
        "--fp",
        str(workdir / "fp.ckpt"),
        "--seed",
        "1",
        "--out",
        str(out),
        "--plots",
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,L2"
    assert len(lines) > 1
    assert (tmp_path / "gap.csv.svg").read_text().startswith("<svg")
    assert "max=" in stdout and "median=" in stdout


def test_quantized_policy_required_where_float_expected(capsys, workdir, tmp_path):
    code, _, err = run(
        capsys,
        "discrepancy",
        "--policy",
        str(workdir / "ptq.ckpt"),
        "--fp",
        str(workdir / "ptq.ckpt"),
        "--out",
        str(tmp_path / "gap.csv"),
    )
    assert code == 2
    assert "float policy" in err


def test_saliency_div_reports_nonnegative_value(capsys, workdir):
    code, stdout, _ = run(
        capsys,
        "saliency-div",
        "--data",
        str(workdir / "data.bin"),
        "--policy",
        str(workdir / "ptq.ckpt"),
        "--fp",
        str(workdir / "fp.ckpt"),
        "--states",
        "4",
    )
    assert code == 0
    value = float(re.search(r"saliency_divergence=([0-9eE+.-]+)", stdout).group(1))
    assert value >= 0.0


def test_qmod_export_flag(capsys, workdir, tmp_path):
    qmod = tmp_path / "model.qmod"
    code, _, _ = run(
        capsys,
        "ptq",
        "--data",
        str(workdir / "data.bin"),
        "--policy",
        str(workdir / "fp.ckpt"),
        "--out",
        str(tmp_path / "p2.ckpt"),
        "--qmod",
        str(qmod),
        *FAST_TRAIN,
    )
    assert code == 0
    assert qmod.read_bytes()[:8] == b"SQILQMOD"


def test_bench_kernels_prints_table(capsys):
    code, stdout, _ = run(capsys, "bench-kernels", "--sizes", "16", "--repeats", "2")
    assert code == 0
    lines = stdout.splitlines()
    assert lines[0].split() == ["size", "repeats", "i8_ns", "f32_ns", "speedup", "GB/s"]
    assert lines[1].split()[0] == "16"


def test_report_table_covers_requested_arms(capsys, workdir):
    code, stdout, _ = run(
        capsys,
        "report",
        "--run-dir",
        str(workdir),
        "--arms",
        "fp,ptq,sqil",
        "--episodes",
        "2",
        "--rounds",
        "1",
        "--disc-seeds",
        "1",
        "--states",
        "2",
    )
    assert code == 0
    lines = stdout.splitlines()
    assert lines[0].split()[0] == "arm"
    assert [ln.split()[0] for ln in lines[1:]] == ["fp", "ptq", "sqil"]
    fp_row = lines[1].split()
    assert float(fp_row[4]) == 0.0 and float(fp_row[6]) == 0.0
