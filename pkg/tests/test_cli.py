import csv
import io
import json
import os
from pathlib import Path

import pytest

from fqv import cli

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["generate", "partition", "qv", "integrate", "isometry", "lebesgue", "uniqueness",
            "remainder", "decompose", "ito-mc", "assumptions", "report"]


@pytest.fixture(autouse=True)
def fixed_width(monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")


def run(argv, tmp_path):
    return cli.main(argv + ["--out", str(tmp_path)] if "--out" not in argv else argv)


@pytest.mark.parametrize("command", COMMANDS)
def test_help_golden(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    golden = GOLDEN / f"{command}.txt"
    if os.environ.get("FQV_UPDATE_GOLDEN"):
        golden.write_text(text)
    assert text == golden.read_text()


def test_help_lists_common_flags(capsys):
    cli.main(["isometry", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--out", "--seed", "--grid", "--horizon", "--dyadic", "--lebesgue",
                 "--functional", "--path", "--tol", "--workers"):
        assert flag in text


def test_qv_constant_path(tmp_path):
    assert run(["qv", "--path", "constant:3.0", "--dyadic", "4:8"], tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [r["qv_T"] for r in rep["rows"]] == [0.0] * 5
    assert rep["config"]["path"]["level"] == 3.0


def test_isometry_identity(tmp_path):
    assert run(["isometry", "--functional", "identity", "--path", "brownian:seed=42"], tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert max(r["gap"] for r in rep["rows"]) <= 1e-12


def test_lebesgue_columns(tmp_path):
    run(["lebesgue", "--path", "brownian:seed=42", "--levels", "4:9"], tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "report.csv").read_text())))
    assert [int(r["n"]) for r in rows] == list(range(4, 10))
    for r in rows:
        n, m = int(r["n"]), int(r["m"])
        assert float(r["count_ratio"]) == pytest.approx(4.0 ** -n * (m - 1), rel=1e-12)
        assert float(r["mesh"]) > 0
    meshes = [float(r["mesh"]) for r in rows]
    assert all(a >= b for a, b in zip(meshes, meshes[1:]))


def test_tolerance_failure_exit_code(tmp_path):
    argv = ["isometry", "--functional", "square", "--grid", "4096", "--dyadic", "4:10", "--tol", "rel_gap=1e-9"]
    assert run(argv, tmp_path) == 1
    ok = ["isometry", "--functional", "identity", "--grid", "4096", "--dyadic", "4:10"]
    assert run(ok, tmp_path / "ok") == 0


def test_unknown_flag_suggests(tmp_path, capsys):
    assert cli.main(["isometry", "--functionl", "square"]) == 2
    err = capsys.readouterr().err
    assert "--functionl" in err and "did you mean --functional" in err


@pytest.mark.parametrize("argv", [
    ["qv", "--dyadic", "8"],
    ["qv", "--tol", "rel_gap"],
    ["qv", "--path", "levy:1"],
    ["qv", "--functional", "quartic"],
    ["qv", "--grid", "1000", "--dyadic", "4:8"],
    ["nope"],
])
def test_usage_and_config_errors(argv, tmp_path, capsys):
    assert run(argv, tmp_path) == 2
    assert capsys.readouterr().err


def test_config_file_and_override(tmp_path):
    conf = {"kind": "qv", "path": {"generator": "linear", "M": 1024}, "partition": {"n_min": 2, "n_max": 4}}
    (tmp_path / "c.json").write_text(json.dumps(conf))
    out = tmp_path / "o"
    assert cli.main(["qv", "--config", str(tmp_path / "c.json"), "--dyadic", "3:5", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert [r["n"] for r in rep["rows"]] == [3, 4, 5]
    assert rep["rows"][0]["qv_T"] == pytest.approx(1 / 8)


def test_manifest_hashes_stable(tmp_path):
    argv = ["uniqueness", "--functional", "x_runint", "--grid", "4096", "--dyadic", "4:10"]
    run(argv, tmp_path / "a")
    run(argv, tmp_path / "b")
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["files"] == b["files"]
    assert set(a["files"]) == {"report.json", "report.csv"}


def test_generate_and_reuse_path(tmp_path):
    assert run(["generate", "--path", "fbm:H=0.4", "--seed", "7", "--grid", "1024"], tmp_path / "g") == 0
    files = json.loads((tmp_path / "g" / "manifest.json").read_text())["files"]
    assert set(files) == {"path.fqvp", "path.csv"}
    argv = ["qv", "--path", f"file:{tmp_path / 'g' / 'path.fqvp'}", "--dyadic", "2:10"]
    assert run(argv, tmp_path / "q") == 0


def test_partition_command(tmp_path):
    assert run(["partition", "--path", "brownian:seed=1", "--grid", "4096", "--lebesgue", "2:5"], tmp_path) == 0
    data = json.loads((tmp_path / "partitions.json").read_text())
    assert data["kind"] == "lebesgue"
    assert (tmp_path / "partitions.csv").read_text().startswith("n,k,grid_index,time")


def test_report_command(tmp_path, capsys):
    run(["qv", "--path", "linear", "--grid", "1024", "--dyadic", "2:4"], tmp_path)
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "report.json"), "--csv"]) == 0
    assert capsys.readouterr().out == (tmp_path / "report.csv").read_text()
    assert cli.main(["report", str(tmp_path / "missing.json")]) == 2
