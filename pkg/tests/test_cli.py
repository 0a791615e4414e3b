import json

import pytest

from degdiff.cli import CHECKS, build_config, build_parser, main, parse_matrix


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_to_stdout(capsys):
    code, out, _ = run(capsys, "simulate", "--steps", "8", "--seed", "7")
    lines = out.splitlines()
    assert code == 0
    assert lines[0] == "t,x_1,x_2,x_3,dB_1,dB_2"
    assert len(lines) == 10 and all(len(l.split(",")) == 6 for l in lines)
    assert run(capsys, "simulate", "--steps", "8", "--seed", "7")[1] == out


def test_simulate_files(tmp_path, capsys):
    target = tmp_path / "p.csv"
    code, _, _ = run(capsys, "simulate", "--model", "circle", "--steps", "4", "--paths", "3",
                     "--out", str(target))
    assert code == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["p_0.csv", "p_1.csv", "p_2.csv"]
    assert (tmp_path / "p_2.csv").read_text().splitlines()[0] == "t,x_1,dB_1,dB_2"


def test_config_errors(capsys):
    code, _, err = run(capsys, "simulate", "--model", "dyson", "--x0", "1,0,2")
    assert code == 1 and "x0" in err
    code, _, err = run(capsys, "check", "nope")
    assert code == 1
    assert all(name in err for name in CHECKS)
    code, _, err = run(capsys, "sweep", "jk-inverse", "--levels", "100,200")
    assert code == 1 and "levels" in err
    code, _, err = run(capsys, "check", "poincare-path", "--paths", "0")
    assert code == 1 and "paths" in err
    code, _, err = run(capsys, "check", "poincare-path", "--f", "x1 +")
    assert code == 1 and "offset 4" in err


def test_check_json_and_exit_codes(capsys):
    code, out, _ = run(capsys, "check", "poincare-path", "--f", "x1", "--steps", "16", "--paths",
                       "500", "--omit-runtime")
    data = json.loads(out)
    assert code == 0
    assert list(data)[:8] == ["name", "lhs", "rhs", "slack", "combined_stderr", "verdict", "params",
                              "seed"]
    assert "runtime_ms" not in data
    code, out, _ = run(capsys, "check", "poincare-path", "--steps", "16", "--paths", "500")
    assert "runtime_ms" in json.loads(out)


def test_failing_check_exits_2(capsys):
    # circle flows are exact, so the sweep error cannot strictly decrease
    code, out, _ = run(capsys, "sweep", "calcul1", "--model", "circle", "--levels", "64,128",
                       "--paths", "20")
    assert code == 2
    assert out.splitlines()[0] == "steps,dt,relative_l2"


def test_single_level_sweep(capsys):
    code, out, _ = run(capsys, "sweep", "jk-inverse", "--model", "circle", "--levels", "32",
                       "--paths", "20")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 2 and len(lines[1].split(",")) == 3


def test_report_round_trip(tmp_path, capsys):
    out = tmp_path / "r.json"
    argv = ["check", "mod-poincare", "--model", "classical", "--param", "n=2", "--param",
            "A=-1,0;0.5,-1", "--f", "x1*x2", "--steps", "16", "--paths", "400", "--seed", "5",
            "--omit-runtime", "--out", str(out)]
    code, first, _ = run(capsys, *argv)
    assert code == 0 and out.read_text() == first
    code, again, _ = run(capsys, "check", "mod-poincare", "--config", str(out), "--omit-runtime")
    assert again == first


def test_ini_config_and_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmodel = dyson\nsteps = 64\nseed = 3\n[model]\nd = 4\ngamma = 0.5\n")
    parser = build_parser()
    monkeypatch.setenv("DEGDIFF_SEED", "9")
    c = build_config(parser.parse_args(["check", "dyson-suite", "--config", str(cfg), "--steps", "128"]))
    assert (c.model, c.steps, c.seed, c.model_params) == ("dyson", 128, 3, {"d": 4, "gamma": 0.5})
    c = build_config(parser.parse_args(["check", "dyson-suite"]))
    assert c.seed == 9
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="colour"):
        build_config(parser.parse_args(["check", "wick", "--config", str(bad)]))


def test_matrix_parsing():
    assert parse_matrix("0,1;-1,0").tolist() == [[0.0, 1.0], [-1.0, 0.0]]
    with pytest.raises(ValueError):
        parse_matrix("1,2;3")


def test_workers_do_not_change_reports(capsys):
    argv = ["check", "logsob-path", "--f", "exp(x1/2)", "--steps", "16", "--paths", "3000",
            "--omit-runtime"]
    a = run(capsys, *argv, "--workers", "1")[1]
    b = run(capsys, *argv, "--workers", "3")[1]
    assert a == b


def test_negative_initial_state_as_separate_argument(capsys):
    assert main(["simulate", "--model", "dyson", "--param", "d=3", "--x0", "-1,0,1",
                 "--steps", "4", "--seed", "1"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[1].split(",")[1:4] == ["-1.0", "0.0", "1.0"]
