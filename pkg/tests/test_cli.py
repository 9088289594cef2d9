import csv
import json

import pytest

from fp8train.harness import experiments as ex
from fp8train.harness.cli import build_parser, main
from fp8train.harness.config import config_from_args
from fp8train.numerics import E4M3, decode

TINY = ["--seed", "3", "--task", "lm", "--corpus-bytes", "3000", "--context", "4", "--embed", "8",
        "--hidden", "16", "--n-blocks", "1", "--batch", "4", "--steps", "6", "--diag-every", "2"]


@pytest.mark.parametrize("fmt,count", [("E4M3", 256), ("E5M2", 256), ("BF16", 65536)])
def test_format_dump(tmp_path, fmt, count):
    out = tmp_path / "codes.csv"
    assert main(["format-dump", fmt, "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == count
    assert list(rows[0]) == ["bits_hex", "sign", "exponent_field", "mantissa_field", "value"]
    if fmt == "E4M3":
        by_code = {r["bits_hex"]: r for r in rows}
        assert float(by_code["0x7E"]["value"]) == 448.0
        assert by_code["0x7F"]["value"] == "nan"
        assert by_code["0x38"]["exponent_field"] == "7" and float(by_code["0x38"]["value"]) == 1.0
        assert float(by_code["0x01"]["value"]) == 2.0**-9


def test_format_dump_stdout(capsys):
    assert main(["format-dump", "E5M2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 257
    assert lines[0x7C + 1].endswith("inf")


def test_run_and_compare(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", *TINY, "--out", str(a)]) == 0
    assert main(["run", *TINY, "--precision", "fp8_full", "--out", str(b)]) == 0
    summary = json.loads(capsys.readouterr().out.split("\n}\n")[0] + "\n}")
    assert summary["steps"] == 6 and summary["diverged"] is False
    assert main(["compare", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "bf16_baseline" in out and "fp8_full" in out


def test_run_from_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 4\ntask = regression\nd_in = 3\nhidden = 4\nn_samples = 32\nsteps = 5\n")
    out = tmp_path / "r"
    assert main(["run", "--config", str(cfg), "--steps", "3", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["seed"] == 4 and man["config"]["steps"] == 3


def test_missing_seed_is_a_usage_error(tmp_path, capsys):
    assert main(["run", "--steps", "2", "--out", str(tmp_path / "x")]) == 2
    assert "seed" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_config_file_and_corpus(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "x")]) == 2
    assert main(["run", *TINY, "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path / "y")]) == 2


def test_invalid_choice_exits(tmp_path):
    with pytest.raises(SystemExit):
        main(["format-dump", "E3M4"])
    with pytest.raises(SystemExit):
        main(["run", "--seed", "x", "--out", str(tmp_path)])


def test_sweep_lr(capsys):
    assert main(["sweep-lr", *TINY, "--lrs", "1e-3", "1e-2"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {(r["activation"], r["lr"]) for r in rows} == {
        ("swiglu", 1e-3), ("swiglu", 1e-2), ("smooth_swiglu", 1e-3), ("smooth_swiglu", 1e-2)}


def test_sweep_optimizer_small(tmp_path, capsys):
    assert main(["sweep-optimizer", *TINY, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 6
    assert json.loads((tmp_path / "sweep.json").read_text())["rows"][0]["m_format"] == "FP32"


def test_alignment_small(capsys):
    assert main(["alignment", "--seed", "0", "--steps", "50", "--d-in", "3", "--hidden", "4",
                 "--n-samples", "64", "--batch", "64"]) == 0
    captured = capsys.readouterr()
    rep = json.loads(captured.out)
    assert rep["steps"] <= 50 and len(rep["cos"]) == 4
    assert "did not reach" in captured.err


def test_decode_helper_consistency():
    # the dump uses the same decoder the library exports
    assert decode(0x7E, E4M3) == 448.0


def test_presets_sit_below_file_and_flags(tmp_path):
    cfg_file = tmp_path / "a.cfg"
    cfg_file.write_text("seed = 9\nsteps = 70\n")
    args = build_parser().parse_args(["alignment", "--config", str(cfg_file), "--steps", "80"])
    preset = ex.alignment_config(0).to_dict()
    preset["seed"] = None
    cfg = config_from_args(args, base=preset)
    assert (cfg.seed, cfg.steps) == (9, 80)
    assert (cfg.input_offset, cfg.teacher_tied, cfg.n_samples) == (200.0, True, 3600)


def test_alignment_uses_experiment_preset(capsys):
    assert main(["alignment", "--seed", "0", "--steps", "5"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["n_samples"] == 3600 and rep["n_params"] == 72 and rep["mu"] == 1e-3
