import csv
import io
import sys

import numpy as np
import pytest

from cfsim import cli


def run(argv, capsys):
    rc = cli.main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_simulate_repeatable(capsys):
    argv = ["simulate", "--model", "bundled:chain.yaml", "--n", "20", "--seed", "4"]
    rc, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert rc == cli.EXIT_OK and a == b
    rows = _rows(a)
    assert rows[0] == ["u_Z", "u_X", "u_Y", "Z", "X", "Y"] and len(rows) == 21


def test_simulate_zero_rows(capsys):
    rc, out, _ = run(["simulate", "--model", "bundled:chain.yaml", "--n", "0"], capsys)
    assert rc == 0 and out.strip() == "u_Z,u_X,u_Y,Z,X,Y"


def test_simulate_to_file(tmp_path, capsys):
    dest = tmp_path / "out.csv"
    rc, out, _ = run(["simulate", "--model", "bundled:credit.yaml", "--n", "5", "-o", str(dest)], capsys)
    assert rc == 0 and out == ""
    assert len(dest.read_text().splitlines()) == 6


def test_missing_and_invalid_inputs(tmp_path, capsys):
    rc, _, err = run(["simulate", "--model", str(tmp_path / "none.yaml")], capsys)
    assert rc == cli.EXIT_INPUT and "no such file" in err
    bad = tmp_path / "cyc.yaml"
    bad.write_text("variables:\n  - {name: A, error: 'normal(0,1)', expr: 'B + u'}\n"
                   "  - {name: B, error: 'normal(0,1)', expr: 'A + u'}\n")
    rc, _, err = run(["simulate", "--model", str(bad)], capsys)
    assert rc == cli.EXIT_INPUT and "cycle" in err.lower()


def test_counterfactual_summary(capsys):
    rc, out, _ = run(["counterfactual", "--model", "bundled:chain.yaml",
                      "--query", "bundled:chain_query.yaml", "--n", "50000"], capsys)
    assert rc == 0
    summary = [line[2:] for line in out.splitlines() if line.startswith("# ")]
    rows = _rows("\n".join(summary))
    rec = dict(zip(rows[0], rows[1]))
    assert rec["target"] == "Y"
    assert float(rec["mean"]) == pytest.approx(-0.5, abs=0.02)
    assert float(rec["var"]) == pytest.approx(0.5, abs=0.03)


def test_counterfactual_no_prune_and_table(tmp_path, capsys):
    dest = tmp_path / "cf.csv"
    rc, out, _ = run(["counterfactual", "--model", "bundled:chain.yaml", "--query",
                      "bundled:chain_query.yaml", "--n", "200", "--no-prune", "--format", "table",
                      "-o", str(dest)], capsys)
    assert rc == 0 and out.startswith("target")
    assert len(dest.read_text().splitlines()) == 201


def test_counterfactual_infeasible_exit(tmp_path, capsys):
    model = tmp_path / "m.yaml"
    model.write_text("variables:\n"
                     "  - {name: X, error: 'uniform(0, 1)', expr: 'u', monotonic: additive}\n"
                     "  - {name: Y, error: 'uniform(0, 1)', expr: 'X + u', monotonic: additive}\n")
    query = tmp_path / "q.yaml"
    query.write_text("conditions: {Y: 9}\nintervention: {X: 0.5}\nn: 100\n")
    rc, _, err = run(["counterfactual", "--model", str(model), "--query", str(query)], capsys)
    assert rc == cli.EXIT_INFEASIBLE and "infeasible" in err


def _toy_files(tmp_path, predictor_body):
    model = tmp_path / "toy.yaml"
    model.write_text("""
variables:
  - {name: A, kind: discrete, error: "uniform(0, 1)", expr: "bernoulli(u; 0.5)"}
  - {name: W, error: "normal(0, 1)", expr: "A + u", monotonic: additive}
  - {name: Y, error: "normal(0, 1)", expr: "A + W + u", monotonic: additive}
""")
    case = tmp_path / "case.yaml"
    case.write_text("outcome: Y\nsensitive: {A: [0, 1]}\nw_conditions: {W: 0.2}\n"
                    "c_conditions: {A: 1}\nn: 300\n")
    script = tmp_path / "pred.py"
    script.write_text(predictor_body)
    pred = tmp_path / "pred.yaml"
    pred.write_text(f"kind: external\ncommand: {sys.executable} pred.py\ntimeout: 20\n")
    return model, case, pred


def test_fairness_external_predictor(tmp_path, capsys):
    model, case, pred = _toy_files(tmp_path, "import sys\n"
                                   "for _ in sys.stdin.readlines()[1:]: print(0.25)\n")
    rc, out, _ = run(["fairness", "--model", str(model), "--case", str(case),
                      "--predictor", str(pred)], capsys)
    assert rc == 0
    assert "counterfactual_difference,0" in out


def test_fairness_predictor_failure_exit(tmp_path, capsys):
    model, case, pred = _toy_files(tmp_path, "print('nonsense')\n")
    rc, _, err = run(["fairness", "--model", str(model), "--case", str(case),
                      "--predictor", str(pred)], capsys)
    assert rc == cli.EXIT_PREDICTOR and "predictor" in err


def test_bench_single_round(capsys):
    rc, out, _ = run(["bench", "--case", "A", "--n", "500", "--rounds", "2"], capsys)
    assert rc == 0
    rows = [r for r in _rows(out) if r and not r[0].startswith("#")]
    assert rows[0][0] == "case" and rows[1][:2] == ["A", "500"]


def test_argument_errors(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["simulate", "--model", "bundled:chain.yaml", "--n", "-3"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(["bench", "--threads", "0"])
