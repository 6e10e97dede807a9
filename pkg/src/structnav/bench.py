"""Monte-Carlo strategy comparison: scenario files, runs, CSV tables."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .estimator import (
    OPT_MAX_BUDGET,
    EstimatorConfig,
    SelectionRefused,
    Strategy,
    parse_strategy,
    run_estimator,
    strategy_label,
)
from .imu import ImuNoise
from .priors import AssociationConfig
from .simulator import (
    FeatureNoise,
    FovSpec,
    ImuSpec,
    WorldSpec,
    evaluate_rmse,
    generate_trajectory,
    generate_world,
    integrate_ground_truth,
    loop_waypoints,
    simulate_imu,
    simulate_measurements,
    trajectory_rows,
)
from .solver import SolverConfig

WORKERS_ENV = "STRUCTNAV_WORKERS"
SWEEP_BUDGETS = (0, 5, 10, 20, 40, None)
FAMILIES = ("imu", "point", "line", "plane", "structure", "linear")


# ---------------------------------------------------------------------------
# Scenario file
# ---------------------------------------------------------------------------


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldConfig(_Model):
    n_points: int = Field(40, ge=0)
    n_lines: int = Field(15, ge=0)
    n_planes: int = Field(15, ge=0)
    half_extent: tuple[float, float, float] = (10.0, 10.0, 1.5)
    grid: float = Field(0.5, gt=0)
    clearance: float = Field(0.3, ge=0)
    on_plane: float = Field(0.4, ge=0, le=1)
    on_line: float = Field(0.3, ge=0, le=1)
    seed: int = 0


class TrajectoryConfig(_Model):
    duration: float = Field(60.0, gt=0)
    # explicit waypoints override the generated loop
    waypoints: list[tuple[float, float, float]] | None = None
    radius: tuple[float, float] = (6.0, 4.5)
    laps: int = Field(2, ge=1)
    points_per_lap: int = Field(12, ge=4)
    z_amplitude: float = 0.3
    jitter: float = Field(0.4, ge=0)
    roll_amplitude: float = 0.05
    pitch_amplitude: float = 0.05
    wobble_frequency: float = 0.2
    seed: int = 0


class ImuConfig(_Model):
    gyro_white: float = Field(1e-3, ge=0)
    accel_white: float = Field(2e-2, ge=0)
    gyro_walk: float = Field(1e-5, ge=0)
    accel_walk: float = Field(3e-4, ge=0)
    rate: float = Field(200.0, gt=0)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)


class FeatureNoiseConfig(_Model):
    point: float = Field(0.02, ge=0)
    line: float = Field(0.01, ge=0)
    plane: float = Field(0.02, ge=0)


class FovConfig(_Model):
    max_range: float = Field(8.0, gt=0)
    half_angle_deg: float = Field(60.0, gt=0, le=90)


class EstimatorSettings(_Model):
    window: int = Field(10, ge=2)
    max_iterations: int = Field(2, ge=1)
    huber_delta: float = Field(1.345, gt=0)
    min_observations: int = Field(3, ge=1)
    init_sigma: tuple[float, float, float, float, float] = (1e-3, 1e-3, 1e-2, 1e-3, 1e-2)


class Scenario(_Model):
    world: WorldConfig = WorldConfig()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    imu: ImuConfig = ImuConfig()
    feature_noise: FeatureNoiseConfig = FeatureNoiseConfig()
    fov: FovConfig = FovConfig()
    estimator: EstimatorSettings = EstimatorSettings()
    frame_rate: float = Field(10.0, gt=0)
    # Monte-Carlo run i draws its noise from SeedSequence([seed, i])
    seed: int = 0

    @property
    def stride(self):
        stride = self.imu.rate / self.frame_rate
        if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
            raise ValueError("IMU rate must be an integer multiple of the frame rate")
        return int(round(stride))


def load_scenario(path):
    return Scenario.model_validate_json(Path(path).read_text())


def default_scenario():
    return Scenario()


# ---------------------------------------------------------------------------
# Single run
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    strategy: str
    seed: int
    trans_rmse: float
    rot_rmse_deg: float
    time_per_iteration: float
    iterations: float
    frames: int
    diverged: int
    status: str
    candidates: float
    selected: float
    max_selected: int
    counts: dict = field(default_factory=dict)


@lru_cache(maxsize=4)
def _world_and_trajectory(scenario_json):
    sc = Scenario.model_validate_json(scenario_json)
    w = sc.world
    world = generate_world(
        WorldSpec(
            w.n_points, w.n_lines, w.n_planes, tuple(w.half_extent), w.grid, w.clearance, w.seed, w.on_plane, w.on_line
        )
    )
    tr = sc.trajectory
    if tr.waypoints is not None:
        wp = np.asarray(tr.waypoints, dtype=float)
    else:
        wp = loop_waypoints(tr.radius, tr.laps, tr.points_per_lap, tr.z_amplitude, tr.seed, tr.jitter)
    traj = generate_trajectory(
        wp,
        tr.duration,
        sc.imu.rate,
        half_extent=tuple(w.half_extent),
        roll_amp=tr.roll_amplitude,
        pitch_amp=tr.pitch_amplitude,
        wobble_freq=tr.wobble_frequency,
    )
    return world, traj


def run_seeds(scenario, run_index):
    """(imu, measurement, estimator) seeds of one Monte-Carlo run."""
    ss = np.random.SeedSequence([scenario.seed, run_index])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(3)]


@dataclass
class SimulatedRun:
    imu: object
    ground_truth: list
    times: np.ndarray
    frames: list
    world: object


def simulate_run(scenario, run_index):
    world, traj = _world_and_trajectory(scenario.model_dump_json())
    s_imu, s_meas, _ = run_seeds(scenario, run_index)
    ic = scenario.imu
    imu = simulate_imu(traj, ImuSpec(ic.gyro_white, ic.accel_white, ic.gyro_walk, ic.accel_walk, ic.rate, ic.gravity), s_imu)
    stride = scenario.stride
    gt = integrate_ground_truth(traj, imu, stride, np.asarray(ic.gravity))
    times = imu.t[::stride][: len(gt)]
    fn = scenario.feature_noise
    frames = simulate_measurements(
        gt,
        times,
        world,
        FovSpec(scenario.fov.max_range, scenario.fov.half_angle_deg),
        FeatureNoise(fn.point, fn.line, fn.plane),
        s_meas,
    )
    return SimulatedRun(imu, gt, times, frames, world)


def estimator_config(scenario, strategy, budget):
    es = scenario.estimator
    ic = scenario.imu
    fn = scenario.feature_noise
    return EstimatorConfig(
        strategy=strategy,
        budget=budget,
        solver=SolverConfig(max_iterations=es.max_iterations, huber_delta=es.huber_delta, window=es.window),
        association=AssociationConfig(min_observations=es.min_observations),
        imu_noise=ImuNoise(ic.gyro_white, ic.accel_white, ic.gyro_walk, ic.accel_walk),
        feature_noise=FeatureNoise(fn.point, fn.line, fn.plane),
        init_sigma=tuple(es.init_sigma),
    )


def run_once(scenario, label, run_index, keep_trajectory=False):
    """Simulate and estimate one (strategy, seed) pair."""
    strategy, budget = parse_strategy(label)
    sim = simulate_run(scenario, run_index)
    _, _, s_est = run_seeds(scenario, run_index)
    cfg = estimator_config(scenario, strategy, budget)
    label = strategy_label(strategy, budget)
    try:
        res = run_estimator(
            sim.frames, sim.imu, scenario.stride, sim.ground_truth[0], cfg, sim.world.db, seed=s_est
        )
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        rec = RunRecord(label, run_index, float("nan"), float("nan"), 0.0, 0.0, 0, 1, f"failed: {exc}", 0.0, 0.0, 0)
        return rec, None
    trans, rot = evaluate_rmse(res.estimates, sim.ground_truth)
    logs = res.frames
    counts = {fam: float(np.mean([f.counts.get(fam, 0) for f in logs])) for fam in FAMILIES}
    rec = RunRecord(
        strategy=label,
        seed=run_index,
        trans_rmse=trans,
        rot_rmse_deg=rot,
        time_per_iteration=res.mean_iteration_time,
        iterations=float(np.mean([f.iterations for f in logs])),
        frames=len(logs),
        diverged=res.diverged,
        status="ok" if res.diverged == 0 else "diverged",
        candidates=float(np.mean([f.candidates for f in logs])),
        selected=float(np.mean([f.selected for f in logs])),
        max_selected=int(max(f.selected for f in logs)),
        counts=counts,
    )
    traj = None
    if keep_trajectory:
        traj = (trajectory_rows(sim.times, res.estimates), trajectory_rows(sim.times, sim.ground_truth))
    return rec, traj


def _job(args):
    scenario_json, label, run_index, keep = args
    return run_once(Scenario.model_validate_json(scenario_json), label, run_index, keep)


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    runs: list
    aggregate: list
    sweep: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def strategy_order(label):
    strategy, budget = parse_strategy(label)
    return (list(Strategy).index(strategy), -1 if budget is None else budget)


def resolve_strategies(labels, budget=None):
    """Attach ``budget`` to budgeted names given without one; validate OPT."""
    out = []
    for text in labels:
        text = text.strip()
        if not text:
            continue
        name = text.split("(")[0].strip().upper()
        if "(" not in text and Strategy(name).budgeted:
            if budget is None:
                raise ValueError(f"{name} needs a budget: use {name}(k) or --budget k")
            text = f"{name}({budget})"
        strategy, k = parse_strategy(text)
        if strategy is Strategy.SPINS_OPT and k > OPT_MAX_BUDGET:
            raise SelectionRefused(
                f"SPINS_OPT({k}) refused: exhaustive selection is limited to budgets <= {OPT_MAX_BUDGET}"
            )
        out.append(strategy_label(strategy, k))
    if not out:
        raise ValueError("no strategies given")
    return sorted(dict.fromkeys(out), key=strategy_order)


def worker_count():
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def _execute(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_job, jobs))


def aggregate_rows(records):
    """Means and standard deviations per strategy, in strategy order."""
    by = {}
    for r in records:
        by.setdefault(r.strategy, []).append(r)
    out = []
    for label in sorted(by, key=strategy_order):
        rs = by[label]
        tr = np.array([r.trans_rmse for r in rs])
        rot = np.array([r.rot_rmse_deg for r in rs])
        ok = np.isfinite(tr)
        out.append(
            {
                "strategy": label,
                "runs": len(rs),
                "failed": int(np.sum(~ok)),
                "diverged": int(sum(r.diverged > 0 for r in rs)),
                "trans_rmse_mean": float(np.mean(tr[ok])) if ok.any() else float("nan"),
                "trans_rmse_std": float(np.std(tr[ok])) if ok.any() else float("nan"),
                "rot_rmse_deg_mean": float(np.mean(rot[ok])) if ok.any() else float("nan"),
                "rot_rmse_deg_std": float(np.std(rot[ok])) if ok.any() else float("nan"),
                "selected_mean": float(np.mean([r.selected for r in rs])),
                "max_selected": int(max(r.max_selected for r in rs)),
            }
        )
    return out


def run_experiment(scenario, strategies, n_runs, out_dir, budget=None, sweep=False, workers=None):
    """Run every (strategy, seed) pair and write the report files to ``out_dir``."""
    if isinstance(scenario, (str, Path)):
        scenario = load_scenario(scenario)
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    labels = resolve_strategies(strategies, budget)
    workers = worker_count() if workers is None else workers
    sc_json = scenario.model_dump_json()
    jobs = [(sc_json, label, i, i == 0) for label in labels for i in range(n_runs)]
    results = _execute(jobs, workers)
    records = sorted((r for r, _ in results), key=lambda r: (strategy_order(r.strategy), r.seed))
    trajectories = {r.strategy: t for r, t in results if t is not None}

    sweep_rows = []
    if sweep:
        sweep_labels = [
            "SPINS_ALL" if k is None else f"SPINS_APPROX({k})" for k in SWEEP_BUDGETS
        ]
        sjobs = [(sc_json, label, i, False) for label in sweep_labels for i in range(n_runs)]
        sres = [r for r, _ in _execute(sjobs, workers)]
        for k, label in zip(SWEEP_BUDGETS, sweep_labels):
            rs = [r for r in sres if r.strategy == label]
            tr = np.array([r.trans_rmse for r in rs])
            rot = np.array([r.rot_rmse_deg for r in rs])
            ok = np.isfinite(tr)
            sweep_rows.append(
                {
                    "k": "all" if k is None else k,
                    "strategy": label,
                    "runs": len(rs),
                    "selected_mean": float(np.mean([r.selected for r in rs])),
                    "trans_rmse_mean": float(np.mean(tr[ok])) if ok.any() else float("nan"),
                    "rot_rmse_deg_mean": float(np.mean(rot[ok])) if ok.any() else float("nan"),
                    "time_per_iteration": float(np.mean([r.time_per_iteration for r in rs])),
                }
            )

    report = ExperimentReport(
        runs=records,
        aggregate=aggregate_rows(records),
        sweep=sweep_rows,
        metadata={
            "library": "structnav",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scenario": json.loads(sc_json),
            "strategies": labels,
            "n_runs": n_runs,
            "run_seeds": {i: run_seeds(scenario, i) for i in range(n_runs)},
            "budget_scope": "per window",
            "workers": workers,
        },
    )
    write_report(report, out_dir, trajectories)
    return report


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

RUN_COLUMNS = [
    "strategy",
    "seed",
    "status",
    "trans_rmse",
    "rot_rmse_deg",
    "frames",
    "iterations",
    "diverged",
    "candidates",
    "selected",
    "max_selected",
] + [f"count_{fam}" for fam in FAMILIES]

AGG_COLUMNS = [
    "strategy",
    "runs",
    "failed",
    "diverged",
    "trans_rmse_mean",
    "trans_rmse_std",
    "rot_rmse_deg_mean",
    "rot_rmse_deg_std",
    "selected_mean",
    "max_selected",
]

SWEEP_COLUMNS = ["k", "strategy", "runs", "selected_mean", "trans_rmse_mean", "rot_rmse_deg_mean"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def _run_row(r):
    row = asdict(r)
    for fam in FAMILIES:
        row[f"count_{fam}"] = r.counts.get(fam, 0.0)
    return row


def write_report(report, out_dir, trajectories=None):
    """CSV files carry only deterministic values; wall-clock timings go to JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "per_run.csv", RUN_COLUMNS, [_run_row(r) for r in report.runs])
    _write_csv(out / "aggregate.csv", AGG_COLUMNS, report.aggregate)
    if report.sweep:
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS, report.sweep)
    timings = {
        "time_per_iteration": [
            {"strategy": r.strategy, "seed": r.seed, "seconds": r.time_per_iteration} for r in report.runs
        ],
        "sweep_time_per_iteration": [
            {"k": row["k"], "seconds": row["time_per_iteration"]} for row in report.sweep
        ],
    }
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    (out / "metadata.json").write_text(json.dumps(report.metadata, indent=2, sort_keys=True))
    if trajectories:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        header = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]
        gt_written = False
        for label, (est, gt) in sorted(trajectories.items(), key=lambda kv: strategy_order(kv[0])):
            _write_rows(tdir / f"{_file_label(label)}.csv", header, est)
            if not gt_written:
                _write_rows(tdir / "ground_truth.csv", header, gt)
                gt_written = True
    (out / "table.txt").write_text(emit_tables(report))


def _file_label(label):
    return label.replace("(", "_").replace(")", "")


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def emit_tables(report):
    """Aligned text table: translation, rotation and time per iteration."""
    times = {}
    for r in report.runs:
        times.setdefault(r.strategy, []).append(r.time_per_iteration)
    header = ("Strategy", "Trans. Errors [m]", "Rot. Errors [deg]", "Time per iteration [s]")
    rows = [
        (
            a["strategy"],
            f"{a['trans_rmse_mean']:.4f}",
            f"{a['rot_rmse_deg_mean']:.4f}",
            f"{np.mean(times.get(a['strategy'], [0.0])):.5f}",
        )
        for a in report.aggregate
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    if report.sweep:
        lines.append("")
        lines.append("Prior budget sweep (SPINS_APPROX(k), k = all is SPINS_ALL)")
        sh = ("k", "selected", "Trans. Errors [m]", "Time per iteration [s]")
        srows = [
            (str(s["k"]), f"{s['selected_mean']:.1f}", f"{s['trans_rmse_mean']:.4f}", f"{s['time_per_iteration']:.5f}")
            for s in report.sweep
        ]
        sw = [max(len(x) for x in col) for col in zip(sh, *srows)]
        lines.append("  ".join(h.ljust(w) for h, w in zip(sh, sw)))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, sw)) for row in srows]
    return "\n".join(lines) + "\n"


def load_report(out_dir):
    """Rebuild a report from ``per_run.csv`` (+ timings, sweep, metadata)."""
    out = Path(out_dir)
    if not (out / "per_run.csv").exists():
        raise FileNotFoundError(f"no per_run.csv in {out}")
    timings = {}
    if (out / "timings.json").exists():
        tj = json.loads((out / "timings.json").read_text())
        timings = {(t["strategy"], t["seed"]): t["seconds"] for t in tj.get("time_per_iteration", [])}
        sweep_t = {str(t["k"]): t["seconds"] for t in tj.get("sweep_time_per_iteration", [])}
    else:
        sweep_t = {}
    records = []
    with open(out / "per_run.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            seed = int(row["seed"])
            records.append(
                RunRecord(
                    strategy=row["strategy"],
                    seed=seed,
                    trans_rmse=float(row["trans_rmse"]),
                    rot_rmse_deg=float(row["rot_rmse_deg"]),
                    time_per_iteration=timings.get((row["strategy"], seed), 0.0),
                    iterations=float(row["iterations"]),
                    frames=int(row["frames"]),
                    diverged=int(row["diverged"]),
                    status=row["status"],
                    candidates=float(row["candidates"]),
                    selected=float(row["selected"]),
                    max_selected=int(row["max_selected"]),
                    counts={fam: float(row[f"count_{fam}"]) for fam in FAMILIES},
                )
            )
    sweep = []
    if (out / "sweep.csv").exists():
        with open(out / "sweep.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                sweep.append(
                    {
                        "k": row["k"] if row["k"] == "all" else int(row["k"]),
                        "strategy": row["strategy"],
                        "runs": int(row["runs"]),
                        "selected_mean": float(row["selected_mean"]),
                        "trans_rmse_mean": float(row["trans_rmse_mean"]),
                        "rot_rmse_deg_mean": float(row["rot_rmse_deg_mean"]),
                        "time_per_iteration": sweep_t.get(row["k"], 0.0),
                    }
                )
    meta = json.loads((out / "metadata.json").read_text()) if (out / "metadata.json").exists() else {}
    return ExperimentReport(records, aggregate_rows(records), sweep, meta)
