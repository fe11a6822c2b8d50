import csv
import json
from pathlib import Path

import numpy as np
import pytest

from reachguard import cli
from reachguard import hj_grid as H
from reachguard.config import ConfigError, dumps_toml, parse_config

SMALL_DI = """
system = "double_integrator"
[solver]
grid = [41, 41]
[critic]
rules = ["hj", "sqrl"]
seeds = 2
steps = 1200
eval_every = 600
"""


def _write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, 'system = "double_integrator"\n'))
    assert cfg["seed"] == 0
    assert cfg["gamma"] == 0.9999
    assert cfg["solver"]["grid"] == [161, 161]
    assert cfg["solver"]["scheme"] == "rk4"
    assert cfg["critic"]["hidden"] == [16, 16]
    assert cfg["critic"]["steps"] == 25000
    assert cfg["agent"]["epsilon"] == 3.0


def test_system_defaults_depend_on_system(tmp_path):
    cfg = parse_config(_write(tmp_path, 'system = "dubins"\n'))
    assert cfg["solver"]["grid"] == [65, 65, 48]
    assert cfg["critic"]["hidden"] == [64, 64, 32]


def test_gamma_out_of_range_reports_value(tmp_path):
    with pytest.raises(ConfigError, match="1.2"):
        parse_config(_write(tmp_path, "gamma = 1.2\n"))


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="agent.epsilom"):
        parse_config(_write(tmp_path, "[agent]\nepsilom = 2.0\n"))


def test_flag_beats_file(tmp_path):
    p = _write(tmp_path, "[agent]\nepsilon = 1.0\n")
    assert parse_config(p)["agent"]["epsilon"] == 1.0
    assert parse_config(p, {"epsilon": 4.2})["agent"]["epsilon"] == 4.2
    args = cli.build_parser().parse_args(["sage-run", "--config", str(p), "--epsilon", "4.2"])
    assert cli.resolve(args)["agent"]["epsilon"] == 4.2


def test_resolved_config_round_trips(tmp_path):
    cfg = parse_config(_write(tmp_path, SMALL_DI))
    again = parse_config(_write(tmp_path, dumps_toml(cfg), "again.toml"))
    assert again == cfg


def test_job_seeds_are_distinct_and_stable():
    a = [np.random.default_rng(cli.job_seed(7, j)).integers(1 << 30) for j in range(4)]
    b = [np.random.default_rng(cli.job_seed(7, j)).integers(1 << 30) for j in range(4)]
    assert a == b
    assert len(set(a)) == 4


# --------------------------------------------------------------------------
# exit codes
# --------------------------------------------------------------------------

def test_exit_code_config_error(tmp_path, capsys):
    p = _write(tmp_path, "gamma = 1.2\n")
    assert cli.main(["solve", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "1.2" in capsys.readouterr().err


def test_exit_code_missing_config_file(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "nope.toml"),
                     "--out-dir", str(tmp_path / "o")]) == cli.EXIT_IO


def test_exit_code_corrupt_grid(tmp_path):
    bad = tmp_path / "grid.hjvg"
    bad.write_bytes(b"not a grid")
    rc = cli.main(["sage-run", "--env", "di", "--safety", f"static:{bad}", "--steps", "10",
                   "--out-dir", str(tmp_path / "o")])
    assert rc == cli.EXIT_IO


def test_static_safety_without_grid_is_config_error(tmp_path):
    rc = cli.main(["sage-run", "--env", "di", "--steps", "10", "--out-dir", str(tmp_path / "o")])
    assert rc == cli.EXIT_CONFIG


def test_bad_threads_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("REACHGUARD_THREADS", "many")
    p = _write(tmp_path, SMALL_DI)
    assert cli.main(["compare", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG


# --------------------------------------------------------------------------
# compare and export
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def compare_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("compare")
    p = _write(d, SMALL_DI)
    rc = cli.main(["compare", "--config", str(p), "--out-dir", str(d / "r1")])
    return d, p, rc


def test_compare_writes_series_per_rule_and_seed(compare_run):
    d, _, rc = compare_run
    assert rc == cli.EXIT_OK
    rows = _rows(d / "r1" / "auroc_curve.csv")
    series = {(r["rule"], r["seed"]) for r in rows}
    assert series == {("hj", "0"), ("hj", "1"), ("sqrl", "0"), ("sqrl", "1")}
    assert all(0.0 <= float(r["auroc"]) <= 1.0 for r in rows)


def test_compare_summary_has_mean_and_std(compare_run):
    d, _, _ = compare_run
    s = json.loads((d / "r1" / "summary.json").read_text())
    assert set(s["rules"]) == {"hj", "sqrl"}
    for stats in s["rules"].values():
        assert len(stats["final"]) == 2
        assert stats["mean"] == pytest.approx(np.mean(stats["final"]))
        assert stats["std"] == pytest.approx(np.std(stats["final"]))
    assert s["partial"] is False


def test_compare_manifest_and_oracle(compare_run):
    d, _, _ = compare_run
    man = json.loads((d / "r1" / "manifest.json").read_text())
    assert man["command"] == "compare"
    assert man["seeds"] == [0, 1]
    assert all(Path(a).exists() for a in man["artifacts"])
    V = H.load_grid(d / "r1" / "oracle_grid.hjvg")
    assert tuple(V.spec.n) == (41, 41)


def test_compare_rerun_from_manifest_is_byte_identical(compare_run):
    d, _, _ = compare_run
    rc = cli.main(["compare", "--config", str(d / "r1" / "config.toml"), "--out-dir", str(d / "r2")])
    assert rc == cli.EXIT_OK
    for name in ("auroc_curve.csv", "summary.json", "oracle_grid.hjvg"):
        assert (d / "r1" / name).read_bytes() == (d / "r2" / name).read_bytes()


def test_export_plots_from_compare(compare_run):
    d, _, _ = compare_run
    assert cli.main(["export-plots", str(d / "r1")]) == cli.EXIT_OK
    rows = _rows(d / "r1" / "tidy_auroc.csv")
    assert set(rows[0]) == {"metric", "group", "seed", "step", "value"}
    assert len(rows) == 8
    assert (d / "r1" / "auroc.png").stat().st_size > 1000


def test_export_plots_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["export-plots", str(tmp_path / "empty")]) == cli.EXIT_IO
    assert "auroc_curve.csv" in capsys.readouterr().err


def test_export_plots_missing_dir(tmp_path):
    assert cli.main(["export-plots", str(tmp_path / "absent")]) == cli.EXIT_IO


# --------------------------------------------------------------------------
# solve, sage-run, eval
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def di_solved(tmp_path_factory):
    d = tmp_path_factory.mktemp("solve")
    p = _write(d, 'system = "di"\n[solver]\ngrid = [61, 61]\n')
    rc = cli.main(["solve", "--config", str(p), "--out-dir", str(d / "solve")])
    return d, rc


def test_solve_writes_grid(di_solved):
    d, rc = di_solved
    assert rc == cli.EXIT_OK
    V = H.load_grid(d / "solve" / "grid.hjvg")
    assert V.metadata["converged"]
    assert json.loads((d / "solve" / "manifest.json").read_text())["timings"]["solve"] >= 0


def test_sage_run_with_static_grid(di_solved):
    d, _ = di_solved
    grid = d / "solve" / "grid.hjvg"
    args = ["sage-run", "--env", "di", "--safety", f"static:{grid}", "--steps", "600", "--seeds", "2",
            "--eval-interval", "300"]
    cfg = _write(d, "[agent]\nwarmup = 100\nbatch_size = 32\nhidden = [16, 16]\n", "agent.toml")
    for out in ("a", "b"):
        assert cli.main(args + ["--config", str(cfg), "--out-dir", str(d / out)]) == cli.EXIT_OK
    for seed in ("seed_00", "seed_01"):
        rows = _rows(d / "a" / seed / "train_metrics.csv")
        assert [int(r["step"]) for r in rows] == [300, 600]
        assert (d / "a" / seed / "train_metrics.csv").read_bytes() == \
            (d / "b" / seed / "train_metrics.csv").read_bytes()
    assert cli.main(["export-plots", str(d / "a")]) == cli.EXIT_OK
    ecp = _rows(d / "a" / "tidy_ECP.csv")
    assert {r["seed"] for r in ecp} == {"00", "01"}
    assert (d / "a" / "avg_speed.png").exists()


def test_eval_random_with_and_without_gate(di_solved):
    d, _ = di_solved
    grid = d / "solve" / "grid.hjvg"
    base = ["eval", "--env", "di", "--episodes", "3", "--spawn", "random"]
    assert cli.main(base + ["--mode", "random", "--out-dir", str(d / "e0")]) == cli.EXIT_OK
    assert cli.main(base + ["--mode", "saferandom", "--safety", f"static:{grid}", "--epsilon", "0.05",
                            "--out-dir", str(d / "e1")]) == cli.EXIT_OK
    for out in ("e0", "e1"):
        rows = _rows(d / out / "eval_metrics.csv")
        assert len(rows) == 3
        assert len(list((d / out / "episodes").glob("episode_*.csv"))) == 3
    gated = _rows(d / "e1" / "eval_metrics.csv")
    assert sum(int(r["interventions"]) for r in gated) > 0
