import io
import math
from pathlib import Path

import numpy as np
import pytest

from dscbi.cli import estimate_row, parse_config, read_path_csv, run_command
from dscbi.errors import ConfigTypeError, InvalidMeasureAtom, MissingKey, UnknownKey
from dscbi.estimate import cls_estimate
from dscbi.model import build_derived

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """\
# minimal critical model
[model]
c1 = 0
c2 = 0
beta1 = 0.5
beta2 = 0.5
b11 = -1
b12 = 1
b21 = 1
b22 = -1
nu_atom = 1 1 1
"""


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = run_command(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_parse_minimal_config():
    cfg = parse_config(MINIMAL)
    d = build_derived(cfg.params)
    assert d.s == 0.0
    assert cfg.params.nu.atoms == [(1.0, 1.0, 1.0)]
    assert cfg.experiment == {}


def test_parse_experiment_block():
    cfg = parse_config(MINIMAL + "[experiment]\nn = 10   # steps\nseed = 3\neuler_h = 0.125\noutput = x.csv\n")
    assert cfg.experiment == {"n": 10, "seed": 3, "euler_h": 0.125, "output": "x.csv"}


def test_unknown_key():
    with pytest.raises(UnknownKey) as info:
        parse_config(MINIMAL + "b13 = 1\n")
    assert info.value.key == "b13" and info.value.line == 12
    with pytest.raises(UnknownKey):
        parse_config(MINIMAL + "[experiment]\nfoo = 1\n")
    with pytest.raises(UnknownKey):
        parse_config(MINIMAL + "[plots]\n")


def test_invalid_atom():
    with pytest.raises(InvalidMeasureAtom):
        parse_config(MINIMAL.replace("nu_atom = 1 1 1", "nu_atom = 0 0 1"))
    with pytest.raises(InvalidMeasureAtom):
        parse_config(MINIMAL.replace("nu_atom = 1 1 1", "nu_atom = 1 1 -1"))


def test_missing_and_malformed():
    with pytest.raises(MissingKey) as info:
        parse_config(MINIMAL.replace("b22 = -1\n", ""))
    assert info.value.key == "b22"
    with pytest.raises(ConfigTypeError):
        parse_config(MINIMAL.replace("c1 = 0", "c1 = zero"))
    with pytest.raises(ConfigTypeError):
        parse_config(MINIMAL.replace("nu_atom = 1 1 1", "nu_atom = 1 1"))
    with pytest.raises(ConfigTypeError):
        parse_config(MINIMAL + "[experiment]\nn = 1.5\n")
    with pytest.raises(ConfigTypeError):
        parse_config("c1 = 0\n" + MINIMAL)
    with pytest.raises(ConfigTypeError):
        parse_config(MINIMAL + "c1 = 0\n")


def test_simulate_then_estimate_round_trip(tmp_path):
    path = tmp_path / "path.csv"
    code, out, err = run(["simulate", "--config", str(CONFIGS / "modelB.cfg"), "--n", "200", "--seed", "4", "--out", str(path)])
    assert code == 0 and err == ""
    assert "scheme: ExactImmigration" in out
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.startswith(b"k,x1,x2\n")
    X = read_path_csv(path)
    assert X.shape == (201, 2)
    est = tmp_path / "est.csv"
    code, out, err = run(["estimate", "--in", str(path), "--out", str(est), "--seed", "4"])
    assert code == 0
    header, row = est.read_text().splitlines()
    assert header.startswith("n,seed,H,Htilde,rho_hat")
    vals = row.split(",")
    r = cls_estimate(X)
    assert float(vals[4]) == r.rho_hat and float(vals[5]) == r.delta_hat
    assert vals[0] == "200" and vals[1] == "4"


def test_estimate_zero_noise_fixture(tmp_path):
    A = np.array([[0.75, 0.25], [0.25, 0.75]])
    X = np.zeros((11, 2))
    for k in range(1, 11):
        X[k] = A @ X[k - 1] + [1.0, 0.2]
    path = tmp_path / "fixture.csv"
    path.write_text("k,x1,x2\n" + "".join(f"{k},{float(x[0])!r},{float(x[1])!r}\n" for k, x in enumerate(X)))
    code, out, err = run(["estimate", "--in", str(path)])
    assert code == 0
    vals = out.splitlines()[1].split(",")
    assert float(vals[4]) == pytest.approx(1.0, abs=1e-10)
    assert float(vals[5]) == pytest.approx(0.5, abs=1e-10)
    assert float(vals[6]) == pytest.approx(1.0, abs=1e-10)
    assert float(vals[7]) == pytest.approx(0.2, abs=1e-10)


def test_estimate_undefined_exits_2(tmp_path):
    path = tmp_path / "diag.csv"
    path.write_text("k,x1,x2\n" + "".join(f"{k},{k},{k}\n" for k in range(10)))
    out_csv = tmp_path / "e.csv"
    code, out, err = run(["estimate", "--in", str(path), "--out", str(out_csv)])
    assert code == 2
    assert err.startswith("EstimatorUndefined")
    row = out_csv.read_text().splitlines()[1].split(",")
    assert row[2] == "1" and row[3] == "0" and row[5] == "nan"


def test_estimate_row_nonpositive_delta():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (30, 2))
    row, err = estimate_row(X)
    r = cls_estimate(X)
    if r.delta_hat <= 0:
        assert err is not None
    assert len(row) == 13


def test_moments_command(tmp_path):
    out_csv = tmp_path / "m.csv"
    code, out, err = run(["moments", "--config", str(CONFIGS / "modelA.cfg"), "--out", str(out_csv)])
    assert code == 0
    assert "V0_uu: 4\n" in out
    rows = [r.split(",") for r in out_csv.read_text().splitlines()]
    assert rows[0] == ["name", "row", "col", "value"]
    table = {r[0]: float(r[3]) for r in rows[1:] if r[1] == ""}
    assert table["V0_uu"] == pytest.approx(4.0, abs=1e-12)
    for key in ("residual_Ctilde_uu", "residual_Ctilde_vv", "residual_V0_uu", "residual_V0_vv"):
        assert abs(table[key]) < 1e-10


def test_mechanisms_command():
    code, out, err = run(["mechanisms", "--config", str(CONFIGS / "modelA.cfg"), "--grid", "0,1", "--nsteps", "200"])
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "lambda1,lambda2,t,laplace" and len(lines) == 5
    last = lines[-1].split(",")
    assert float(last[3]) == pytest.approx(math.exp(-(2 - math.exp(-2))), rel=1e-10)


def test_limits_command():
    code, out, err = run(["limits", "--config", str(CONFIGS / "modelB.cfg")])
    assert code == 0
    assert out.startswith("matrix,row,col,value\nregime,,,PureImmigrationNormal\n")
    assert "R,gamma,gamma,13.399537" in out


def test_lln_command():
    code, out, err = run(["lln", "--config", str(CONFIGS / "modelA.cfg"), "--n", "2000", "--seed", "1"])
    assert code == 0
    assert out.splitlines()[0] == "quantity,statistic,limit,deviation"


def test_montecarlo_repeatable(tmp_path):
    outs = []
    for i in range(2):
        out_csv = tmp_path / f"mc{i}.csv"
        code, out, err = run(
            ["montecarlo", "--config", str(CONFIGS / "modelA.cfg"), "--n", "50", "--reps", "120", "--seed", "7", "--out", str(out_csv)]
        )
        assert code == 0
        outs.append((out_csv.read_bytes(), out))
    assert outs[0] == outs[1]
    header = outs[0][0].split(b"\n")[0].decode()
    assert header.startswith("rep,H,Htilde,rho_hat")


def test_exit_codes_and_diagnostics(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(MINIMAL + "b13 = 1\n")
    code, out, err = run(["limits", "--config", str(bad)])
    assert code == 1 and out == "" and err.startswith("UnknownKey") and "b13" in err
    code, out, err = run(["limits", "--config", str(tmp_path / "missing.cfg")])
    assert code == 1
    code, out, err = run(["bogus"])
    assert code == 1
    sub = tmp_path / "sub.cfg"
    sub.write_text(MINIMAL.replace("b11 = -1", "b11 = -2").replace("b22 = -1", "b22 = -2"))
    code, out, err = run(["limits", "--config", str(sub)])
    assert code == 1 and err.startswith("NotCritical")
    plain = tmp_path / "plain.cfg"
    plain.write_text(MINIMAL)
    code, out, err = run(["simulate", "--config", str(plain)])
    assert code == 1 and err.startswith("MissingKey")


def test_config_files_parse():
    for name in ("modelA.cfg", "modelB.cfg", "modelC.cfg"):
        cfg = parse_config((CONFIGS / name).read_text())
        assert build_derived(cfg.params).s == 0.0
