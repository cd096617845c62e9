import json
import subprocess
import sys

import pytest

from rwre_lab.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main

from small_configs import small_config, write_small


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_malformed_config_exits_1_without_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "kalikow", "lambdas": [0.5]')
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "rwre_lab.cli", "kalikow", "--config", str(bad), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "config error" in proc.stderr
    assert not out.exists()


@pytest.mark.parametrize("extra", [["--threads", "0"], ["--seed", "-3"]])
def test_bad_flags_exit_1(tmp_path, extra):
    cfg = write_small("kalikow", tmp_path)
    assert main(["kalikow", "--config", str(cfg), "--out", str(tmp_path / "o")] + extra) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_out_of_range_lambda_is_a_config_error(tmp_path):
    raw = small_config("kalikow")
    raw["lambdas"] = [0.3]
    cfg = tmp_path / "k.json"
    cfg.write_text(json.dumps(raw))
    assert main(["kalikow", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_kalikow_run_writes_results(tmp_path, capsys):
    cfg = write_small("kalikow", tmp_path)
    assert main(["kalikow", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    files = outputs(tmp_path / "o")
    assert {"results.csv", "report.json"} <= set(files)
    out = capsys.readouterr().out
    assert "PASS kalikow:exit_identity_0.1" in out


@pytest.mark.parametrize("name", ["kalikow", "ballistic", "einstein_homogeneous"])
def test_reruns_are_byte_identical_across_thread_counts(tmp_path, name):
    cfg = write_small(name, tmp_path)
    exp = small_config(name)["experiment"]
    runs = []
    for threads in ("1", "2", "1"):
        out = tmp_path / f"t{threads}_{len(runs)}"
        assert main([exp, "--config", str(cfg), "--out", str(out), "--threads", threads]) in (EXIT_OK, EXIT_CHECK)
        runs.append(outputs(out))
    assert runs[0] == runs[1] == runs[2]


def test_seed_override_changes_results(tmp_path):
    cfg = write_small("einstein_homogeneous", tmp_path)
    main(["einstein", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["einstein", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"])
    a = (tmp_path / "a" / "einstein" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "einstein" / "results.csv").read_bytes()
    assert a != b
