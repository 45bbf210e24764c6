import io
import json
import subprocess
import sys

import numpy as np
import pytest

from spatial_r0.cli import SWEEP_COLUMNS, main, parse_schedule

from test_modelfile import SIS


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def read_tsv(text):
    rows = [ln.split("\t") for ln in text.splitlines() if ln and not ln.startswith("#")]
    summary = dict(ln[2:].split("\t", 1) for ln in text.splitlines() if ln.startswith("# ") and "\t" in ln)
    return rows[0], rows[1:], summary


def test_check_builtin_passes():
    code, text = run("check", "--model", "builtin:sis")
    assert code == 0 and "all checks passed" in text


def test_check_negative_rate_fails(tmp_path):
    p = tmp_path / "neg.yaml"
    p.write_text(SIS.replace("gamma: 1", 'gamma: "-1 + 2*x"'))
    code, text = run("check", "--model", str(p))
    assert code == 1
    assert "FAIL" in text and "node 0 (x=0)" in text


def test_check_staged_power_law_note():
    code, text = run("check", "--model", "builtin:staged", "--set", "alpha=1", "--format", "json")
    data = json.loads(text)
    assert code == 0 and data["ok"]
    assert any("N > 0" in n for n in data["notes"])


def test_r0_constants():
    code, text = run("r0", "--model", "builtin:sis", "--set", "beta=2", "--d", "0.3", "--format", "json")
    data = json.loads(text)
    assert code == 0
    assert data["R0"] == pytest.approx(2.0, abs=1e-10) and data["s_BF"] == pytest.approx(1.0, abs=1e-10)
    assert data["sign"] == "agree" and data["oracle_small"] == 2.0


def test_r0_zika_small_diffusion():
    code, text = run("r0", "--model", "builtin:zika", "--d", "1e-6", "--grid-n", "4096", "--format", "json")
    assert code == 0 and abs(json.loads(text)["R0"] - 2.0) <= 0.04


def test_r0_table_output():
    code, text = run("r0", "--model", "builtin:vector_host", "--grid-n", "65")
    assert code == 0 and "R0       = 0.7071067811" in text


@pytest.mark.parametrize("argv", [
    ("r0", "--model", "builtin:sis", "--grid-n", "2"),
    ("r0", "--model", "builtin:nope"),
    ("r0", "--model", "builtin:sis", "--set", "delta=1"),
    ("r0", "--model", "builtin:sis", "--d", "-1"),
    ("r0", "--model", "builtin:sis", "--d", "1,2"),
    ("sweep", "--model", "builtin:sis", "--d", ""),
    ("sweep", "--model", "builtin:sis", "--d", "log:1:2"),
    ("sweep", "--model", "builtin:sis", "--d", "1", "--jobs", "0"),
    ("sweep", "--model", "builtin:sis", "--d", "1", "--eps", "1.5"),
    ("check", "--model", "/nonexistent.yaml"),
])
def test_validation_exit_code(argv, capsys):
    code, _ = run(*argv)
    assert code == 1
    assert capsys.readouterr().err


def test_argparse_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["r0"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_numerical_failure_exit_two(tmp_path, capsys):
    p = tmp_path / "flat.yaml"
    p.write_text(SIS.replace('Vminus: {I: "gamma*I", S: "beta*S*I"}', 'Vminus: {I: "0*I", S: "beta*S*I"}'))
    code, _ = run("r0", "--model", str(p), "--grid-n", "17")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_parse_schedule():
    assert parse_schedule("1,2:3") == [(1.0,), (2.0, 3.0)]
    got = parse_schedule("log:1e-2:1e2:5")
    np.testing.assert_allclose([g[0] for g in got], [1e-2, 1e-1, 1, 10, 100], rtol=1e-12)


def test_sweep_sis_schedule(tmp_path):
    out = tmp_path / "s.tsv"
    code, _ = run("sweep", "--model", "builtin:sis", "--d", "log:1e-6:1e4:7", "--grid-n", "2049", "--out", str(out))
    assert code == 0
    header, rows, summary = read_tsv(out.read_text())
    assert header == ["d_I", "d_S", *SWEEP_COLUMNS]
    R = np.array([float(r[2]) for r in rows])
    assert len(rows) == 7 and np.all(np.diff(R) < 0)
    assert abs(R[0] - 3) <= 0.06 and abs(R[-1] - 2) <= 0.02
    err_small = np.array([float(r[4]) for r in rows])
    err_large = np.array([float(r[5]) for r in rows])
    assert np.all(np.diff(err_small) > 0) and np.all(np.diff(err_large) < 0)
    assert float(summary["oracle_small"]) == pytest.approx(3.0)
    assert float(summary["oracle_large"]) == pytest.approx(2.0, abs=1e-6)
    assert summary["sign_disagreements"] == "0" and summary["outside_envelope"] == "0"
    assert all(r[-1] == "ok" for r in rows)


def test_sweep_single_tuple():
    code, text = run("sweep", "--model", "builtin:zika", "--d", "0.1:0.2:0.3", "--grid-n", "65")
    header, rows, summary = read_tsv(text)
    assert code == 0 and len(rows) == 1 and rows[0][:3] == ["1.000000000000e-01", "2.000000000000e-01", "3.000000000000e-01"]
    assert "small_limit" in summary and "large_limit" in summary


def test_sweep_model_file_placeholders(tmp_path):
    from test_modelfile import ZIKA
    p = tmp_path / "z.yaml"
    p.write_text(ZIKA)
    code, text = run("sweep", "--model", str(p), "--d", "1e-2,1", "--grid-n", "65", "--format", "json")
    data = json.loads(text)
    assert code == 0 and [pt["diffusion"] for pt in data["points"]] == [[0.01] * 3, [1.0] * 3]
    assert data["oracle_small"] is None and data["large_hypothesis"] == "verified"


def test_sweep_point_failures_are_reported(tmp_path):
    p = tmp_path / "flat.yaml"
    p.write_text(SIS.replace('Vminus: {I: "gamma*I", S: "beta*S*I"}', 'Vminus: {I: "0*I", S: "beta*S*I"}'))
    code, text = run("sweep", "--model", str(p), "--d", "0.1,1", "--grid-n", "17")
    _, rows, summary = read_tsv(text)
    assert code == 2 and [r[-1] for r in rows] == ["error", "error"]
    assert "# error\t" in text


def test_sweep_repeatable():
    argv = ("sweep", "--model", "builtin:vector_host", "--set", "lambda1=2 + cos(pi*x)", "--d", "log:1e-3:1e3:4",
            "--grid-n", "129")
    assert run(*argv) == run(*argv)


def test_limits_command():
    code, text = run("limits", "--model", "builtin:sis", "--format", "json")
    data = json.loads(text)
    assert code == 0 and data["small_limit"] == pytest.approx(3.0) and data["large_limit"] == pytest.approx(2.0, abs=1e-6)
    assert data["envelope_small"]["low"] <= data["envelope_small"]["high"]


def test_simulate_command(tmp_path):
    out = tmp_path / "traj.tsv"
    code, _ = run("simulate", "--model", "builtin:sis", "--set", "beta=0.5", "--grid-n", "17", "--T", "5",
                  "--samples", "5", "--out", str(out))
    text = out.read_text()
    assert code == 0 and text.startswith("t\tdistance\tinfected_norm") and "# passed\tTrue" in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "spatial_r0", "r0", "--model", "builtin:sis", "--grid-n", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "grid-n" in res.stderr
