"""Per-frame sliding-window estimator over a simulated stream."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .factors import sqrt_information
from .geometry import (
    DegenerateLine,
    DegeneratePlane,
    EPS_PLANE,
    ImuState,
    PlaneCP,
    PlueckerLine,
    Point3,
    SlidingWindowState,
    pluecker_to_cp,
    transform_line_to_global,
    transform_plane_to_global,
    transform_point_to_global,
)
from .imu import ImuNoise, imu_preintegrate, propagate
from .priors import AssociationConfig, associate
from .selection import candidate_fims, exhaustive_select, greedy_select, pose_indices, random_select
from .simulator import FeatureNoise
from .solver import (
    FactorGraph,
    FeatureObservation,
    ImuEdge,
    LinearFactor,
    SolverConfig,
    StructureFactor,
    build_normal_equations,
    marginalize_oldest,
    optimize,
)


class Strategy(str, Enum):
    P_INS = "P_INS"
    PL_INS = "PL_INS"
    PLP_INS = "PLP_INS"
    SPINS_RAND = "SPINS_RAND"
    SPINS_APPROX = "SPINS_APPROX"
    SPINS_OPT = "SPINS_OPT"
    SPINS_ALL = "SPINS_ALL"

    @property
    def families(self):
        if self is Strategy.P_INS:
            return ("point",)
        if self is Strategy.PL_INS:
            return ("point", "line")
        return ("point", "line", "plane")

    @property
    def uses_priors(self):
        return self.value.startswith("SPINS")

    @property
    def budgeted(self):
        return self in (Strategy.SPINS_RAND, Strategy.SPINS_APPROX, Strategy.SPINS_OPT)


class SelectionRefused(ValueError):
    pass


OPT_MAX_CANDIDATES = 15
OPT_MAX_BUDGET = 4


def parse_strategy(text):
    """``"SPINS_RAND(20)"`` -> (Strategy.SPINS_RAND, 20)."""
    text = text.strip()
    budget = None
    if "(" in text:
        name, rest = text.split("(", 1)
        budget = int(rest.rstrip(")"))
        text = name
    strat = Strategy(text.upper())
    if strat.budgeted and budget is None:
        raise ValueError(f"{strat.value} needs a budget, e.g. {strat.value}(20)")
    if budget is not None and budget < 0:
        raise ValueError("budget must be non-negative")
    return strat, budget


def strategy_label(strategy, budget):
    return f"{strategy.value}({budget})" if strategy.budgeted else strategy.value


@dataclass
class EstimatorConfig:
    strategy: Strategy = Strategy.PLP_INS
    budget: int | None = None
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=2))
    association: AssociationConfig = field(default_factory=AssociationConfig)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    feature_noise: FeatureNoise = field(default_factory=FeatureNoise)
    # first-state prior standard deviations: rotation, position, velocity, gyro bias, accel bias
    init_sigma: tuple = (1e-3, 1e-3, 1e-2, 1e-3, 1e-2)


@dataclass
class FrameLog:
    index: int
    iterations: int
    iteration_time: float
    counts: dict
    candidates: int
    selected: int


@dataclass
class EstimatorResult:
    times: list
    estimates: list
    frames: list = field(default_factory=list)
    diverged: int = 0

    @property
    def mean_iteration_time(self):
        total = sum(f.iteration_time for f in self.frames)
        n = sum(f.iterations for f in self.frames)
        return total / n if n else 0.0


def _init_feature(family, pose, z):
    if family == "point":
        return Point3(transform_point_to_global(pose, z))
    if family == "line":
        local = PlueckerLine(z[:3], z[3:])
        return pluecker_to_cp(transform_line_to_global(pose, local))
    d = float(np.linalg.norm(z))
    if d < EPS_PLANE:
        raise DegeneratePlane("plane through the sensor")
    n, dg = transform_plane_to_global(pose, z / d, d)
    if abs(dg) < EPS_PLANE:
        raise DegeneratePlane("plane through the global origin")
    return PlaneCP.from_nd(n, dg)


def _state_prior(key, state, sigmas):
    s_rot, s_pos, s_vel, s_bg, s_ba = sigmas
    diag = np.repeat([s_rot, s_pos, s_vel, s_bg, s_ba], 3)
    return LinearFactor([key], {key: state}, np.diag(1.0 / diag), np.zeros(15))


class SlidingWindowEstimator:
    def __init__(self, config, db=None, seed=0):
        self.config = config
        self.db = db
        self.rng = np.random.default_rng(seed)
        self.graph = FactorGraph()
        self.x = SlidingWindowState()
        self.observations = {}
        self.last_key = None
        self.sqrt_info = {
            "point": sqrt_information(config.feature_noise.point**2 * np.eye(3)),
            "line": sqrt_information(config.feature_noise.line**2 * np.eye(6)),
            "plane": sqrt_information(config.feature_noise.plane**2 * np.eye(3)),
        }
        if config.strategy is Strategy.SPINS_OPT and (config.budget or 0) > OPT_MAX_BUDGET:
            raise SelectionRefused(f"SPINS_OPT limited to budget <= {OPT_MAX_BUDGET}")

    # -- frame handling ------------------------------------------------------

    def initialize(self, frame, state):
        key = ("imu", frame.index)
        self.x[key] = state
        self.graph.linear.append(_state_prior(key, state, self.config.init_sigma))
        self.last_key = key
        self._add_features(frame, key)
        return self._solve(frame)

    def step(self, frame, imu_intervals):
        prev = self.x[self.last_key]
        pre = imu_preintegrate(imu_intervals, (prev.bg, prev.ba), self.config.imu_noise)
        key = ("imu", frame.index)
        self.x[key] = propagate(prev, pre)
        self.graph.imu.append(ImuEdge(self.last_key, key, pre, sqrt_information(pre.cov)))
        self.last_key = key
        self._add_features(frame, key)
        return self._solve(frame)

    def _add_features(self, frame, key):
        pose = self.x[key].pose
        tables = {"point": frame.points, "line": frame.lines, "plane": frame.planes}
        for family in self.config.strategy.families:
            for fid in sorted(tables[family]):
                z = np.asarray(tables[family][fid], dtype=float)
                if family == "line":
                    z = z / np.linalg.norm(z[3:])
                fkey = (family, fid)
                if fkey not in self.x:
                    try:
                        self.x[fkey] = _init_feature(family, pose, z)
                    except (DegenerateLine, DegeneratePlane):
                        continue
                self.graph.features.append(FeatureObservation(family, key, fkey, z, self.sqrt_info[family]))
                self.observations[fkey] = self.observations.get(fkey, 0) + 1

    def _select_priors(self):
        cfg = self.config
        self.graph.structure = []
        if not cfg.strategy.uses_priors or self.db is None:
            return 0, 0
        assoc = associate(self.x, self.observations, self.db, cfg.association)
        n_cand = len(assoc)
        if not assoc:
            return 0, 0
        if cfg.strategy is Strategy.SPINS_ALL:
            chosen = list(range(len(assoc)))
        elif cfg.strategy is Strategy.SPINS_RAND:
            chosen = random_select([_Id(i) for i in range(len(assoc))], cfg.budget, self.rng).chosen
        else:
            cands = candidate_fims(assoc, self.x)
            if not cands or cfg.budget == 0:
                chosen = []
            else:
                base = build_normal_equations(self.graph, self.x, cfg.solver.huber_delta).H
                pidx = pose_indices(self.x)
                if cfg.strategy is Strategy.SPINS_APPROX:
                    chosen = greedy_select(cands, base, cfg.budget, pidx).chosen
                else:
                    if len(cands) > OPT_MAX_CANDIDATES:
                        raise SelectionRefused(
                            f"SPINS_OPT window has {len(cands)} candidates (limit {OPT_MAX_CANDIDATES})"
                        )
                    chosen = exhaustive_select(cands, base, cfg.budget, pidx).chosen
        self.graph.structure = [
            StructureFactor(assoc[i].kind, assoc[i].a, assoc[i].b, assoc[i].prior.value, assoc[i].prior.sigma)
            for i in sorted(chosen)
        ]
        return n_cand, len(chosen)

    def _solve(self, frame):
        n_cand, n_sel = self._select_priors()
        self.x, report = optimize(self.graph, self.x, self.config.solver)
        estimate = self.x[self.last_key]
        log = FrameLog(
            frame.index,
            report.iterations,
            float(sum(report.iteration_times)),
            self.graph.counts(),
            n_cand,
            n_sel,
        )
        self.graph, self.x = marginalize_oldest(self.graph, self.x, self.config.solver)
        return estimate, log, report.diverged


@dataclass
class _Id:
    id: int


def run_estimator(frames, imu, stride, initial_state, config, db=None, seed=0):
    """Run the window over all frames; returns the per-frame online estimates."""
    est = SlidingWindowEstimator(config, db, seed)
    result = EstimatorResult([], [])
    for f, frame in enumerate(frames):
        if f == 0:
            s, log, div = est.initialize(frame, initial_state)
        else:
            k0 = (f - 1) * stride
            s, log, div = est.step(frame, imu.intervals(k0, k0 + stride))
        result.times.append(frame.t)
        result.estimates.append(s)
        result.frames.append(log)
        result.diverged += int(div)
    return result
