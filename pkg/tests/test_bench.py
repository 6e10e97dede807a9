import csv
import json

import numpy as np
import pytest
from pydantic import ValidationError

from structnav.bench import (
    AGG_COLUMNS,
    RUN_COLUMNS,
    Scenario,
    emit_tables,
    load_report,
    resolve_strategies,
    run_experiment,
    run_seeds,
    simulate_run,
    worker_count,
)
from structnav.estimator import SelectionRefused


def small_scenario(**kw):
    base = {
        "world": {"n_points": 20, "n_lines": 6, "n_planes": 6},
        "trajectory": {"duration": 2.0},
        "seed": 4,
    }
    base.update(kw)
    return Scenario.model_validate(base)


@pytest.fixture(scope="module")
def report_dirs(tmp_path_factory):
    sc = small_scenario()
    labels = ["P_INS", "PLP_INS", "SPINS_APPROX(3)"]
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    ra = run_experiment(sc, labels, 2, a, workers=1)
    run_experiment(sc, labels, 2, b, workers=2)
    return ra, a, b


def test_run_seeds_are_reproducible_and_distinct():
    sc = small_scenario()
    assert run_seeds(sc, 0) == run_seeds(sc, 0)
    assert run_seeds(sc, 0) != run_seeds(sc, 1)
    assert len(set(run_seeds(sc, 0))) == 3


def test_strategies_share_simulated_data():
    sc = small_scenario()
    a, b = simulate_run(sc, 1), simulate_run(sc, 1)
    assert np.array_equal(a.imu.accel, b.imu.accel)
    assert all(np.array_equal(x.pose.p, y.pose.p) for x, y in zip(a.ground_truth, b.ground_truth))


def test_resolve_strategies():
    assert resolve_strategies(["SPINS_ALL", "P_INS", "SPINS_RAND"], budget=5) == ["P_INS", "SPINS_RAND(5)", "SPINS_ALL"]
    assert resolve_strategies(["P_INS", "P_INS"]) == ["P_INS"]
    with pytest.raises(ValueError):
        resolve_strategies(["SPINS_APPROX"])
    with pytest.raises(ValueError):
        resolve_strategies(["NOT_A_STRATEGY"])
    with pytest.raises(ValueError):
        resolve_strategies([])
    with pytest.raises(SelectionRefused):
        resolve_strategies(["SPINS_OPT(5)"])
    assert resolve_strategies(["SPINS_OPT(4)"]) == ["SPINS_OPT(4)"]


def test_scenario_validation():
    with pytest.raises(ValidationError):
        Scenario.model_validate({"imu": {"gyro_white": -1.0}})
    with pytest.raises(ValidationError):
        Scenario.model_validate({"unknown": 1})
    with pytest.raises(ValueError):
        Scenario.model_validate({"frame_rate": 7.0}).stride
    assert Scenario().stride == 20


def test_worker_count(monkeypatch):
    monkeypatch.setenv("STRUCTNAV_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("STRUCTNAV_WORKERS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("STRUCTNAV_WORKERS")
    assert worker_count() >= 1


def test_report_files(report_dirs):
    report, out, _ = report_dirs
    with open(out / "per_run.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == RUN_COLUMNS
    assert [(r["strategy"], r["seed"]) for r in rows] == [
        (s, str(i)) for s in ("P_INS", "PLP_INS", "SPINS_APPROX(3)") for i in (0, 1)
    ]
    assert all(r["status"] == "ok" for r in rows)
    with open(out / "aggregate.csv", newline="") as fh:
        agg = list(csv.DictReader(fh))
    assert list(agg[0]) == AGG_COLUMNS
    for row, a in zip(agg, report.aggregate):
        mean = np.mean([float(r["trans_rmse"]) for r in rows if r["strategy"] == row["strategy"]])
        assert float(row["trans_rmse_mean"]) == pytest.approx(mean, rel=1e-12)
    assert all(int(float(r["max_selected"])) <= 3 for r in rows if r["strategy"] == "SPINS_APPROX(3)")
    timings = json.loads((out / "timings.json").read_text())
    assert len(timings["time_per_iteration"]) == 6
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["n_runs"] == 2 and meta["scenario"]["seed"] == 4
    traj = out / "trajectories"
    assert {p.name for p in traj.iterdir()} == {"P_INS.csv", "PLP_INS.csv", "SPINS_APPROX_3.csv", "ground_truth.csv"}
    assert (out / "table.txt").read_text() == emit_tables(report)


def test_csvs_independent_of_worker_count(report_dirs):
    _, a, b = report_dirs
    for name in ("per_run.csv", "aggregate.csv", "trajectories/ground_truth.csv", "trajectories/PLP_INS.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_load_report_round_trip(report_dirs):
    report, out, _ = report_dirs
    loaded = load_report(out)
    assert emit_tables(loaded) == emit_tables(report)
    with pytest.raises(FileNotFoundError):
        load_report(out / "missing")


def test_sweep_rows(tmp_path):
    report = run_experiment(small_scenario(), ["P_INS"], 1, tmp_path, sweep=True, workers=1)
    assert [row["k"] for row in report.sweep] == [0, 5, 10, 20, 40, "all"]
    assert (tmp_path / "sweep.csv").exists()
    assert "budget sweep" in emit_tables(report)
    assert [row["k"] for row in load_report(tmp_path).sweep] == [0, 5, 10, 20, 40, "all"]
