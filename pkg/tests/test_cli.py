import contextlib
import io
import json

import pytest

from mfdb.cli import check_beta, check_degenerate, check_solution, dispatch, render_summary
from mfdb.io import load_policy
from mfdb.model import SystemParams, scenario_preset
from mfdb.sim import Strategy, simulate


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    """A three-frame constant-channel policy written by ``mfdb solve``."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"frames": 3, "seeds": 2, "fp_max_iters": 100}))
    policy = d / "policy.mfdb"
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = dispatch(["solve", "--config", str(cfg), "--out", str(policy)])
    return d, cfg, policy, (code, buf.getvalue())


def _data_lines(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def test_solve_writes_policy_and_tables(solved):
    d, cfg, policy, (code, out) = solved
    assert code == 0
    sol, header = load_policy(policy)
    assert out.startswith(f"converged in {sol.report.iterations} iterations")
    assert sol.report.converged and header["initial_energy"] == "uniform"
    conv = _data_lines(policy.with_name(policy.name + ".convergence.csv"))
    assert conv[0] == "iteration,sup_change_s" and len(conv) == sol.report.iterations + 1
    slices = _data_lines(policy.with_name(policy.name + ".slices.csv"))
    assert slices[0] == "frame,energy,delay_s,mass"
    assert len(slices) == 1 + 3 * 101


def test_solve_reports_non_convergence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"frames": 1, "fp_max_iters": 2}))
    code = dispatch(["solve", "--config", str(cfg), "--out", str(tmp_path / "p")])
    assert code == 3
    assert capsys.readouterr().out.startswith("NOT converged in 2 iterations")
    sol, _ = load_policy(tmp_path / "p")
    assert not sol.report.converged


def test_compare_csv_schema(solved, capsys):
    d, cfg, policy, _ = solved
    out = d / "cmp.csv"
    assert dispatch(["compare", "--config", str(cfg), "--policy", str(policy), "--out", str(out)]) == 0
    text = out.read_text()
    assert "# fingerprint: " in text and "# seeds: 2" in text
    rows = _data_lines(out)
    assert rows[0] == "frame,strategy,mean_delay_s,cdc_s2,mean_energy,drop_rate"
    assert len(rows) == 1 + 4 * 3
    assert {r.split(",")[1] for r in rows[1:]} == {"mfdb", "acb", "aloha", "mb"}
    summary = capsys.readouterr().out
    assert summary.splitlines()[0].split() == ["strategy", "mean_delay_ms", "cdc_T_ms2", "exhaustion_frame"]


def test_simulate_and_sweep(solved):
    d, cfg, policy, _ = solved
    sim = d / "sim.csv"
    assert dispatch(["simulate", "--config", str(cfg), "--strategy", "aloha", "--out", str(sim)]) == 0
    assert len(_data_lines(sim)) == 1 + 3
    sw = d / "sweep.csv"
    args = ["sweep", "--config", str(cfg), "--policy", str(policy), "--n-values", "50,100",
            "--seeds", "2", "--out", str(sw)]
    assert dispatch(args) == 0
    rows = _data_lines(sw)
    assert rows[0] == "n_devices,strategy,mean_delay_s,stderr_s"
    assert len(rows) == 1 + 2 * 4


def test_reruns_are_byte_identical(solved):
    d, cfg, policy, _ = solved
    outs = []
    for k in range(2):
        out = d / f"rerun{k}.csv"
        dispatch(["compare", "--config", str(cfg), "--policy", str(policy), "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["solve"],
        ["simulate", "--out", "x.csv", "--nope"],
        ["sweep", "--n-values", "a,b", "--out", "x.csv"],
    ],
)
def test_usage_errors_exit_nonzero(argv, capsys):
    assert dispatch(argv) != 0
    assert "usage" in capsys.readouterr().err


def test_named_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"frame": 3}))
    assert dispatch(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "ConfigError" in err and "'frame'" not in err and "frame" in err
    assert dispatch(["simulate", "--strategy", "mfdb", "--out", str(tmp_path / "x")]) == 2
    assert "--policy" in capsys.readouterr().err
    assert dispatch(["simulate", "--policy", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
    bad = tmp_path / "bad.mfdb"
    bad.write_text("something else\n")
    assert dispatch(["simulate", "--policy", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "PolicyFormatError" in capsys.readouterr().err


def test_render_summary():
    assert render_summary({}) == "no data"
    p, sc = SystemParams(device_count=300), scenario_preset("cc")
    tables = {k: simulate(Strategy(k), sc, p, 0) for k in ("mb", "aloha")}
    text = render_summary(tables)
    assert text == render_summary(tables)
    lines = text.splitlines()
    assert len({len(l) for l in lines}) == 1
    mb = next(l for l in lines if l.startswith("mb"))
    ex = tables["mb"].exhaustion_frame
    assert ex is not None and mb.split()[2] == "INF" and mb.split()[3] == str(ex)


def test_check_beta_and_degenerate():
    beta = check_beta()
    assert beta[0].passed and "100 points" in beta[0].detail
    assert "printed" in beta[1].name
    deg = check_degenerate(SystemParams())
    assert deg.passed, deg.detail


def test_check_quick_exit_code(capsys):
    assert dispatch(["check", "--quick"]) == 0
    out = capsys.readouterr().out
    assert all(l.startswith("[PASS]") for l in out.splitlines())


def test_check_solution_on_small_solve(small_cc_solution):
    results = check_solution(small_cc_solution)
    assert [r.name for r in results] == [
        "fixed point converged", "mass conservation", "closed form vs argmin", "brute-force argmin spot check",
    ]
    assert results[0].passed and results[1].passed and results[3].passed
