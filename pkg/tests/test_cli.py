import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from irmesh import reporting
from irmesh.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_SOLVE,
    ConfigError,
    RunConfig,
    build_config,
    main,
    parse_config_text,
)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_defaults_resolve_per_strategy():
    assert RunConfig(strategy="fixed").resolved_n_h() == 20
    assert RunConfig().resolved_n_h() == 2
    assert RunConfig().resolved_eps_f() == 1.15e-1
    assert RunConfig(problem="constant-rate").resolved_eps_f() == 1e-10
    cfg = RunConfig()
    s = cfg.strategy_config()
    assert (s.eps_rho, s.eps_theta, s.eps_q, s.p_max) == (0.999, 2e-4, 0.1, 4)
    assert cfg.n_q == 4 and cfg.degree_x == 2


def test_config_file_parsing_and_precedence():
    vals = parse_config_text("# comment\neps_f = 0.2\nn-h = 3  # inline\nforward_tracking = off\n")
    assert vals == {"eps_f": 0.2, "n_h": 3, "forward_tracking": False}
    cfg = build_config(vals, {"n_h": 5})
    assert cfg.n_h == 5 and cfg.eps_f == 0.2
    for bad in ("nonsense", "unknown = 1", "n_h = two", "strategy = fancy", "interpolate = maybe"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)
    with pytest.raises(ConfigError):
        build_config({}, {"eps_rho": 1.5})
    with pytest.raises(ConfigError):
        build_config({}, {"jitter": -1.0})


def test_solve_constant_rate_fixed(tmp_path):
    out = tmp_path / "run"
    assert main(["solve", "--problem", "constant-rate", "--strategy", "fixed", "--n-h", "1", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "converged" and summary["final_f_m"] <= 1e-10
    rows = read_csv(out / "iterations.csv")
    assert list(rows[0]) == list(reporting.TRACE_COLUMNS)
    assert summary["total_jacobian_evals"] == sum(int(r["jacobian_evals"]) for r in rows)
    assert summary["total_residual_evals"] == sum(int(r["residual_evals"]) for r in rows)
    assert summary["config"]["initial_guess"].startswith("straight line")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["files"]["iterations.csv"] == {"schema": "irmesh.iterations", "version": 1}
    traj = read_csv(out / "trajectory.csv")
    assert sum(r["kind"] == "sample" for r in traj) == 1000
    assert sum(r["kind"] == "x-node" for r in traj) == 3
    mesh = json.loads((out / "mesh.json").read_text())
    assert mesh["n_h"] == 1 and mesh["interval_lengths"] == [1.0]


def test_floats_round_trip(tmp_path):
    out = tmp_path / "run"
    main(["solve", "--problem", "exponential", "--strategy", "fixed", "--n-h", "3", "--out", str(out)])
    rows = reporting.read_iterations(out / "iterations.csv")
    text = (out / "iterations.csv").read_text()
    assert "\r" not in text
    assert reporting.fmt(rows[-1]["f_m"]) in text
    assert reporting.fmt(0.1) == "0.10000000000000001"
    assert float(reporting.fmt(np.pi)) == np.pi
    assert reporting.fmt(float("nan")) == "nan"


def test_exit_codes(tmp_path, capsys):
    assert main(["solve", "--eps-rho", "1.5", "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(["solve", "--problem", "acrobot", "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["solve", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    # A mesh far too coarse for the target stalls: solve failure.
    code = main(["solve", "--problem", "exponential", "--strategy", "fixed", "--n-h", "1", "--degree-x", "1",
                 "--eps-f", "1e-12", "--out", str(tmp_path / "b")])
    assert code == EXIT_SOLVE
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["solve", "--problem", "constant-rate", "--out", str(blocker / "sub")]) == EXIT_IO
    assert main(["plot", str(tmp_path / "nowhere")]) == EXIT_IO


def test_config_file_run(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"problem = exponential\nstrategy = progressive\nout = {tmp_path / 'c'}\n")
    assert main(["solve", "--config", str(cfg)]) == EXIT_OK
    assert json.loads((tmp_path / "c" / "summary.json").read_text())["config"]["problem"] == "exponential"


def test_determinism_byte_identical(tmp_path):
    args = ["solve", "--problem", "cartpole", "--jitter", "0.05", "--seed", "7", "--max-outer-iterations", "20"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "iterations.csv").read_bytes() == (tmp_path / "b" / "iterations.csv").read_bytes()
    main(["solve", "--problem", "cartpole", "--jitter", "0.05", "--seed", "8", "--max-outer-iterations", "20",
          "--out", str(tmp_path / "c")])
    assert (tmp_path / "a" / "iterations.csv").read_bytes() != (tmp_path / "c" / "iterations.csv").read_bytes()


def test_compare_and_plot(tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "--problem", "exponential", "--strategies", "fixed,progressive", "--trials", "2",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = read_csv(out / "comparison.csv")
    assert [r["strategy"] for r in rows] == ["fixed", "progressive"]
    assert all(r["trials"] == "2" for r in rows)
    conv = read_csv(out / "convergence.csv")
    assert {r["strategy"] for r in conv} == {"fixed", "progressive"}
    assert (out / "fixed" / "iterations.csv").exists()

    plot_out = tmp_path / "plots"
    assert main(["plot", str(out / "fixed"), str(out / "progressive"), "--out", str(plot_out)]) == EXIT_OK
    for name in ("plot_evals.csv", "plot_convergence.csv", "evals.svg", "convergence.svg"):
        assert (plot_out / name).stat().st_size > 0
    pc = read_csv(plot_out / "plot_convergence.csv")
    assert not any(r["refinement"] == "1" for r in pc if r["strategy"] == "fixed")
    assert any(r["refinement"] == "1" for r in pc if r["strategy"] == "progressive")
    pe = read_csv(plot_out / "plot_evals.csv")
    fixed_total = sum(int(r["jacobian_evals"]) for r in pe if r["strategy"] == "fixed")
    assert fixed_total == int(rows[0]["total_jacobian_evals"])
    svg = (plot_out / "evals.svg").read_bytes()
    main(["plot", str(out / "fixed"), str(out / "progressive"), "--out", str(tmp_path / "plots2")])
    assert (tmp_path / "plots2" / "evals.svg").read_bytes() == svg


def test_compare_identical_configs_match(tmp_path):
    main(["compare", "--problem", "exponential", "--strategies", "progressive,progressive", "--trials", "1",
          "--out", str(tmp_path / "x")])
    rows = read_csv(tmp_path / "x" / "comparison.csv")
    assert rows[0]["total_jacobian_evals"] == rows[1]["total_jacobian_evals"]


def test_compare_constant_rate_all_succeed(tmp_path):
    assert main(["compare", "--problem", "constant-rate", "--trials", "1", "--parallel", "--out", str(tmp_path / "z")]) == EXIT_OK
    rows = read_csv(tmp_path / "z" / "comparison.csv")
    assert all(r["status"] == "converged" for r in rows)


def test_compare_needs_two_strategies(tmp_path):
    assert main(["compare", "--strategies", "fixed", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["compare", "--trials", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_plot_empty_trace_writes_nothing(tmp_path):
    run = tmp_path / "empty"
    run.mkdir()
    (run / "iterations.csv").write_text(",".join(reporting.TRACE_COLUMNS) + "\n")
    before = sorted(p.name for p in run.iterdir())
    assert main(["plot", str(run)]) == EXIT_IO
    assert sorted(p.name for p in run.iterdir()) == before


def test_plot_rejects_malformed(tmp_path):
    run = tmp_path / "bad"
    run.mkdir()
    (run / "iterations.csv").write_text("row,event\n0,optimize\n")
    with pytest.raises(reporting.InputError):
        reporting.read_iterations(run / "iterations.csv")


def test_check_verb(capsys):
    assert main(["check", "--problem", "cartpole", "--samples", "10"]) == EXIT_OK
    assert "jacobian=ok" in capsys.readouterr().out
    assert main(["check", "--problem", "nope"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "irmesh.cli", "check", "--problem", "exponential"], capture_output=True, text=True
    )
    assert res.returncode == 0 and "validate=ok" in res.stdout
