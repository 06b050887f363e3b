import json
import subprocess
import sys

import pytest

from curesim import MachineConfig, parse_program, run
from curesim.cli import main, run_program
from corpus import CWE, load

HELLO = str(CWE / "hello_overflow.mir")
SO = str(CWE / "so_loop.mir")


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def report(capsys, *argv):
    code, out, err = run_cli(capsys, "run", *argv, "--json", "-")
    return code, json.loads(out), err


def test_run_overflow_reports_spatial(capsys):
    code, rep, err = report(capsys, SO)
    assert code == 0
    assert rep["violationCounts"] == {"SpatialCheckFail": 1}
    v = rep["violations"][0]
    assert v["kind"] == "SpatialCheckFail" and v["function"] == "main"
    assert rep["schema"] == "curesim.report/1"
    assert "SpatialCheckFail=1" in err


def test_mode_off_reports_nothing(capsys):
    code, rep, _ = report(capsys, SO, "--mode", "off")
    assert rep["violations"] == [] and rep["violationCounts"] == {}
    assert rep["stats"]["cstrIterationsCount"] == 0 and rep["stats"]["taggedMemInsts"] == 0


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.mir"
    bad.write_text("func @main() {\n  %x = frob 1\n}\n")
    code, _, err = run_cli(capsys, "run", str(bad))
    assert code == 2
    assert err.startswith(f"curesim: {bad}:2:")


def test_missing_file_and_bad_flag(capsys, tmp_path):
    assert run_cli(capsys, "run", str(tmp_path / "none.mir"))[0] == 2
    assert run_cli(capsys, "run", SO, "--mode", "bogus")[0] == 2
    assert run_cli(capsys, "run", SO, "--emit-taint", "-")[0] == 2


def test_expectation_pass_and_mismatch(tmp_path, capsys):
    assert run_cli(capsys, "run", HELLO, "--expect", str(CWE / "hello_overflow.expect"))[0] == 0
    wrong = tmp_path / "w.expect"
    wrong.write_text(json.dumps({"bug": True, "modes": {"dpt-f": {"SpatialCheckFail": 3}}}))
    code, _, err = run_cli(capsys, "run", HELLO, "--expect", str(wrong))
    assert code == 1
    assert "SpatialCheckFail" in err


def test_expect_supplies_input(capsys):
    code, rep, _ = report(capsys, HELLO, "--expect", str(CWE / "hello_overflow.expect"))
    assert rep["expectation"]["pass"]
    assert rep["violationCounts"] == {"SpatialCheckFail": 1}


def test_program_output_goes_to_stdout(capsys):
    code, out, err = run_cli(capsys, "run", str(CWE / "hello_ok.mir"), "--input", "hi")
    assert code == 0
    assert "hi" in out
    assert "no violations" in err


def test_input_hex(capsys):
    _, a, _ = report(capsys, HELLO, "--input-hex", "41" * 11)
    _, b, _ = report(capsys, HELLO, "--input", "A" * 11)
    assert a == b


def test_environment_fallbacks(monkeypatch, capsys):
    monkeypatch.setenv("CURESIM_MODE", "off")
    _, rep, _ = report(capsys, SO)
    assert rep["mode"] == "off" and rep["violations"] == []
    monkeypatch.setenv("CURESIM_MODE", "dpt-f")
    monkeypatch.setenv("CURESIM_CMT_WAYS", "8")
    monkeypatch.setenv("CURESIM_LFSR_SEED", "0x1234")
    _, rep, _ = report(capsys, SO)
    assert rep["config"]["cmtWays"] == 8
    assert rep["config"]["lfsrSeed"] == 0x1234
    # flags override the environment
    _, rep, _ = report(capsys, SO, "--cmt-ways", "4")
    assert rep["config"]["cmtWays"] == 4


def test_taint_flag_from_environment(monkeypatch, capsys):
    monkeypatch.setenv("CURESIM_TAINT", "1")
    _, rep, _ = report(capsys, HELLO, "--input", "A" * 11)
    assert rep["taint"] is True
    assert rep["protected"] == ["main:%vulArr"]


def test_json_is_byte_identical(tmp_path, capsys):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        main(["run", HELLO, "--input", "A" * 11, "--uarch", "--json", str(p)])
    capsys.readouterr()
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert json.loads(paths[0].read_text())["stats"]["cycles"] > 0


@pytest.mark.parametrize("name, data", [("hello_overflow", b"A" * 11), ("ho_memcpy", b""), ("uaf_load", b"")])
def test_instrumented_text_reruns_identically(tmp_path, capsys, name, data):
    src = str(CWE / f"{name}.mir")
    out = tmp_path / "inst.mir"
    assert run_cli(capsys, "instrument", src, "--mode", "dpt-f", "-o", str(out))[0] == 0
    code = parse_program(out.read_text())
    r = run(code, MachineConfig(enable_dpt=True, mode="dpt-f", input=data))
    rep = run_program(load(CWE / f"{name}.mir"), name, "dpt-f", data=data)
    # line numbers refer to the re-parsed text, everything else must agree
    strip = lambda d: {k: v for k, v in d.items() if k != "line"}
    assert [strip(v.to_dict()) for v in r.violations] == [strip(v) for v in rep["violations"]]
    assert r.exit == rep["exit"]
    assert r.output.hex() == rep["output"]


def test_instrument_to_stdout(capsys):
    code, out, _ = run_cli(capsys, "instrument", HELLO, "--mode", "dpt-h")
    assert code == 0
    assert "cstr" not in out  # hello has no heap objects


def test_emit_taint(tmp_path, capsys):
    g = tmp_path / "g.json"
    code, _, _ = run_cli(capsys, "run", HELLO, "--taint", "--input", "A" * 11, "--emit-taint", str(g))
    d = json.loads(g.read_text())
    assert "main:%vulArr" in d["roots"]
    tainted = {n["root"] for n in d["nodes"] if n["tainted"]}
    assert tainted == {"main:%vulArr"}


def test_corpus_matrix(tmp_path, capsys):
    out = tmp_path / "c.json"
    code, text, err = run_cli(capsys, "corpus", str(CWE), "--json", str(out))
    assert code == 0
    lines = text.splitlines()
    assert lines[0].split()[:5] == ["category", "programs", "DPT-H", "DPT-C", "DPT-F"]
    assert any(l.startswith("stack-overflow") for l in lines)
    assert "runs met expectations" in err
    d = json.loads(out.read_text())
    assert d["schema"] == "curesim.corpus/1"
    assert all(r["pass"] for r in d["runs"])


def test_corpus_empty_dir(tmp_path, capsys):
    assert run_cli(capsys, "corpus", str(tmp_path))[0] == 2


def test_corpus_reports_failures(tmp_path, capsys):
    (tmp_path / "so.mir").write_text((CWE / "so_loop.mir").read_text())
    (tmp_path / "so.expect").write_text(json.dumps({"category": "stack-overflow", "bug": True,
                                                    "modes": {"dpt-f": {}}}))
    code, _, err = run_cli(capsys, "corpus", str(tmp_path))
    assert code == 1
    assert "FAIL so.mir [dpt-f]" in err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "curesim", "run", SO, "--json", "-"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert json.loads(r.stdout)["violationCounts"] == {"SpatialCheckFail": 1}


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
