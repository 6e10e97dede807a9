"""Synthetic 2.5D indoor scenarios: primitives, trajectory, IMU and feature streams.

Ground-truth states are obtained by integrating the noiseless IMU samples
with the same discretization the estimator uses, starting from the spline
state at t = 0. Noiseless data is therefore exactly self-consistent; the
spline only shapes the motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import (
    EPS_LINE,
    EPS_PLANE,
    ImuState,
    PlaneCP,
    PlueckerLine,
    Point3,
    Pose,
    pluecker_to_cp,
    quat_to_rot,
    rot_to_quat,
    so3_exp,
    so3_log,
)
from .imu import GRAVITY
from .priors import DEFAULT_KINDS, ExtractionPolicy, extract_priors


class GenerationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldSpec:
    n_points: int = 40
    n_lines: int = 15
    n_planes: int = 15
    half_extent: tuple = (10.0, 10.0, 1.5)
    grid: float = 0.5
    clearance: float = 0.3
    seed: int = 0
    # share of points placed on planes and on lines; the rest float free
    on_plane: float = 0.4
    on_line: float = 0.3

    def __post_init__(self):
        if min(self.n_points, self.n_lines, self.n_planes) < 0:
            raise ValueError("primitive counts must be non-negative")


@dataclass
class World:
    points: list
    lines: list
    planes: list
    db: object
    diagnostics: list = field(default_factory=list)

    @property
    def line_cps(self):
        return [pluecker_to_cp(l) for l in self.lines]

    @property
    def plane_cps(self):
        return [PlaneCP.from_nd(n, d) for n, d in self.planes]

    def primitives(self):
        return list(self.points) + self.line_cps + self.plane_cps


def _axis_plane(axis, offset):
    n = np.zeros(3)
    n[axis] = 1.0 if offset > 0 else -1.0
    return n, abs(offset)


def _grid_offsets(limit, grid, margin):
    k = int(np.floor((limit - margin) / grid))
    vals = [i * grid for i in range(-k, k + 1) if i != 0]
    return vals


def generate_world(spec=WorldSpec(), policy=None, max_retries=20):
    rng = np.random.default_rng(spec.seed)
    hx, hy, hz = spec.half_extent
    for _ in range(max_retries):
        try:
            return _try_world(spec, rng, policy)
        except GenerationFailed:
            continue
    raise GenerationFailed(f"could not place primitives for {spec}")


def _try_world(spec, rng, policy):
    hx, hy, hz = spec.half_extent
    ext = np.array(spec.half_extent)
    # (axis, offset) planes: boundary first, then interior partitions
    boundary = [(0, -hx), (0, hx), (1, -hy), (1, hy), (2, -hz), (2, hz)]
    planes_ax = boundary[: spec.n_planes]
    pool = [(0, v) for v in _grid_offsets(hx, spec.grid, spec.grid)] + [
        (1, v) for v in _grid_offsets(hy, spec.grid, spec.grid)
    ] + [(2, v) for v in _grid_offsets(hz, spec.grid, spec.grid)]
    pool = [p for p in pool if p not in planes_ax]
    need = spec.n_planes - len(planes_ax)
    if need > len(pool):
        raise GenerationFailed("not enough grid offsets for the requested planes")
    # vertical partitions are the common case indoors
    weights = np.array([1.0 if a < 2 else 0.25 for a, _ in pool])
    pick = rng.choice(len(pool), size=need, replace=False, p=weights / weights.sum())
    planes_ax = planes_ax + [pool[i] for i in sorted(pick)]

    # lines: intersections of two non-parallel planes, kept inside the room
    pairs = [
        (i, j)
        for i in range(len(planes_ax))
        for j in range(i + 1, len(planes_ax))
        if planes_ax[i][0] != planes_ax[j][0]
    ]
    order = rng.permutation(len(pairs))
    lines_ax = []
    seen = set()
    for idx in order:
        if len(lines_ax) == spec.n_lines:
            break
        (a1, o1), (a2, o2) = planes_ax[pairs[idx][0]], planes_ax[pairs[idx][1]]
        key = tuple(sorted([(a1, o1), (a2, o2)]))
        if key in seen:
            continue
        seen.add(key)
        lines_ax.append(key)
    if len(lines_ax) < spec.n_lines:
        raise GenerationFailed("not enough plane pairs for the requested lines")

    planes = [_axis_plane(a, o) for a, o in planes_ax]
    lines = []
    for (a1, o1), (a2, o2) in lines_ax:
        p0 = np.zeros(3)
        p0[a1] = o1
        p0[a2] = o2
        v = np.zeros(3)
        v[3 - a1 - a2] = 1.0
        lines.append(PlueckerLine(np.cross(p0, v), v))

    def clear(x, skip_planes=(), skip_lines=()):
        for k, (a, o) in enumerate(planes_ax):
            if k not in skip_planes and abs(x[a] - o) < spec.clearance:
                return False
        for k, ((a1, o1), (a2, o2)) in enumerate(lines_ax):
            if k not in skip_lines and np.hypot(x[a1] - o1, x[a2] - o2) < spec.clearance:
                return False
        return True

    n_pl = int(round(spec.n_points * spec.on_plane)) if planes_ax else 0
    n_ln = int(round(spec.n_points * spec.on_line)) if lines_ax else 0
    n_ln = min(n_ln, spec.n_points - n_pl)
    points = []
    inner = ext - spec.clearance
    for kind, count in (("plane", n_pl), ("line", n_ln), ("free", spec.n_points - n_pl - n_ln)):
        placed = 0
        tries = 0
        while placed < count:
            tries += 1
            if tries > 2000 * max(count, 1):
                raise GenerationFailed(f"could not place {kind} points")
            x = rng.uniform(-inner, inner)
            if kind == "plane":
                k = int(rng.integers(len(planes_ax)))
                a, o = planes_ax[k]
                x[a] = o
                lines_on = [m for m, key in enumerate(lines_ax) if (a, o) in key]
                ok = clear(x, skip_planes=(k,), skip_lines=lines_on)
            elif kind == "line":
                k = int(rng.integers(len(lines_ax)))
                (a1, o1), (a2, o2) = lines_ax[k]
                x[a1], x[a2] = o1, o2
                on = tuple(m for m, pa in enumerate(planes_ax) if pa in lines_ax[k])
                ok = clear(x, skip_planes=on, skip_lines=(k,))
            else:
                ok = clear(x)
            if ok and np.linalg.norm(x) > spec.clearance:
                points.append(Point3(x))
                placed += 1

    if policy is None:
        policy = ExtractionPolicy(cluster_tol=1e-9, strict=False, min_support=2, kinds=DEFAULT_KINDS)
    diagnostics = []
    world = World(points, lines, planes, None, diagnostics)
    world.db = extract_priors(world.primitives(), policy, diagnostics)
    return world


# ---------------------------------------------------------------------------
# Trajectory
# ---------------------------------------------------------------------------


def _euler_rotation(yaw, pitch, roll):
    """Body -> world rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


@dataclass
class Trajectory:
    spline: CubicSpline
    duration: float
    rate: float
    roll_amp: float = 0.05
    pitch_amp: float = 0.05
    wobble_freq: float = 0.2
    half_extent: tuple = (10.0, 10.0, 1.5)

    def position(self, t):
        return self.spline(t)

    def velocity(self, t):
        return self.spline(t, 1)

    def acceleration(self, t):
        return self.spline(t, 2)

    def _angles(self, t):
        t = np.asarray(t, dtype=float)
        v = self.velocity(t)
        a = self.acceleration(t)
        w = 2 * np.pi * self.wobble_freq
        yaw = np.arctan2(v[..., 1], v[..., 0])
        speed2 = np.maximum(v[..., 0] ** 2 + v[..., 1] ** 2, 1e-12)
        yaw_rate = (v[..., 0] * a[..., 1] - v[..., 1] * a[..., 0]) / speed2
        roll = self.roll_amp * np.sin(w * t)
        roll_rate = self.roll_amp * w * np.cos(w * t)
        pitch = self.pitch_amp * np.sin(0.7 * w * t + 1.0)
        pitch_rate = self.pitch_amp * 0.7 * w * np.cos(0.7 * w * t + 1.0)
        return yaw, pitch, roll, yaw_rate, pitch_rate, roll_rate

    def rotation(self, t):
        """Body -> world."""
        yaw, pitch, roll, *_ = self._angles(t)
        return _euler_rotation(yaw, pitch, roll)

    def body_rate(self, t):
        yaw, pitch, roll, dyaw, dpitch, droll = self._angles(t)
        sr, cr = np.sin(roll), np.cos(roll)
        sp, cp = np.sin(pitch), np.cos(pitch)
        return np.stack(
            [droll - dyaw * sp, dpitch * cr + dyaw * sr * cp, -dpitch * sr + dyaw * cr * cp], axis=-1
        )

    def specific_force(self, t, gravity=GRAVITY):
        R = self.rotation(t)
        return np.einsum("...ji,...j->...i", R, self.acceleration(t) - gravity)

    def state(self, t):
        R = self.rotation(t)
        return ImuState(Pose(rot_to_quat(R.T), self.position(t)), self.velocity(t))


def generate_trajectory(waypoints, duration, rate, half_extent=(10.0, 10.0, 1.5), periodic=None, **kw):
    """Cubic spline through ``waypoints`` spread evenly over ``duration``."""
    wp = np.asarray(waypoints, dtype=float)
    if len(wp) < 4:
        raise ValueError("need at least 4 waypoints")
    if np.any(np.abs(wp) > np.asarray(half_extent)):
        raise ValueError("waypoints must lie inside the room")
    if periodic is None:
        periodic = bool(np.allclose(wp[0], wp[-1]))
    t = np.linspace(0.0, duration, len(wp))
    spline = CubicSpline(t, wp, axis=0, bc_type="periodic" if periodic else "natural")
    return Trajectory(spline, float(duration), float(rate), half_extent=tuple(half_extent), **kw)


def loop_waypoints(radius=(6.0, 4.5), laps=2, n=12, z_amp=0.3, seed=0, jitter=0.4):
    """Closed loop around the room centre; ``laps`` turns in ``n`` points each."""
    rng = np.random.default_rng(seed)
    ang = np.linspace(0.0, 2 * np.pi * laps, n * laps + 1)
    r = 1.0 + jitter / max(radius) * rng.uniform(-1, 1, len(ang))
    r[-1] = r[0]
    wp = np.stack(
        [radius[0] * r * np.cos(ang), radius[1] * r * np.sin(ang), z_amp * np.sin(3 * ang)], axis=-1
    )
    wp[-1] = wp[0]
    return wp


# ---------------------------------------------------------------------------
# IMU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImuSpec:
    gyro_white: float = 1e-3
    accel_white: float = 2e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 3e-4
    rate: float = 200.0
    gravity: tuple = tuple(GRAVITY)

    def __post_init__(self):
        if min(self.gyro_white, self.accel_white, self.gyro_walk, self.accel_walk) < 0:
            raise ValueError("noise densities must be non-negative")


@dataclass
class ImuData:
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    # noiseless samples, used for the ground truth
    gyro_true: np.ndarray
    accel_true: np.ndarray

    def intervals(self, k0, k1, use_noise=True):
        """Piecewise-constant inputs between samples ``k0`` and ``k1``."""
        g = self.gyro if use_noise else self.gyro_true
        a = self.accel if use_noise else self.accel_true
        dt = np.diff(self.t[k0 : k1 + 1])
        gm = 0.5 * (g[k0:k1] + g[k0 + 1 : k1 + 1])
        am = 0.5 * (a[k0:k1] + a[k0 + 1 : k1 + 1])
        return list(zip(gm, am, dt))


def simulate_imu(traj, spec=ImuSpec(), seed=0):
    n = int(round(traj.duration * spec.rate)) + 1
    t = np.arange(n) / spec.rate
    gravity = np.asarray(spec.gravity)
    gyro_true = traj.body_rate(t)
    accel_true = traj.specific_force(t, gravity)
    rng = np.random.default_rng(seed)
    dt = 1.0 / spec.rate
    sq = np.sqrt(dt)
    bg = np.cumsum(np.vstack([np.zeros(3), rng.normal(size=(n - 1, 3)) * spec.gyro_walk * sq]), axis=0)
    ba = np.cumsum(np.vstack([np.zeros(3), rng.normal(size=(n - 1, 3)) * spec.accel_walk * sq]), axis=0)
    gyro = gyro_true + bg + rng.normal(size=(n, 3)) * spec.gyro_white / sq
    accel = accel_true + ba + rng.normal(size=(n, 3)) * spec.accel_white / sq
    return ImuData(t, gyro, accel, bg, ba, gyro_true, accel_true)


def integrate_ground_truth(traj, imu, stride, gravity=GRAVITY):
    """States at every ``stride``-th sample from the noiseless inputs."""
    s0 = traj.state(imu.t[0])
    R = s0.pose.R.T
    p = s0.pose.p.copy()
    v = s0.v.copy()
    out = [ImuState(Pose(rot_to_quat(R.T), p), v, imu.bg[0], imu.ba[0])]
    k = 0
    while k + stride < len(imu.t):
        for w, a, dt in imu.intervals(k, k + stride, use_noise=False):
            R_mid = R @ so3_exp(w * (0.5 * dt))
            acc = R_mid @ a
            p = p + v * dt + 0.5 * (acc + gravity) * dt**2
            v = v + (acc + gravity) * dt
            R = R @ so3_exp(w * dt)
        k += stride
        out.append(ImuState(Pose(rot_to_quat(R.T), p), v, imu.bg[k], imu.ba[k]))
    return out


# ---------------------------------------------------------------------------
# Feature measurements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FovSpec:
    max_range: float = 8.0
    half_angle_deg: float = 60.0


@dataclass(frozen=True)
class FeatureNoise:
    point: float = 0.02
    line: float = 0.01
    plane: float = 0.02


@dataclass
class MeasurementFrame:
    t: float
    index: int
    points: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    planes: dict = field(default_factory=dict)


def visible_points(z, fov):
    """``z`` (N, 3) in the body frame."""
    r = np.linalg.norm(z, axis=-1)
    cos_t = np.cos(np.radians(fov.half_angle_deg))
    return (r <= fov.max_range) & (z[:, 0] >= cos_t * r) & (r > 0)


def visible_lines(n_loc, v_loc, fov):
    """Some point of the line lies inside range and cone."""
    k = np.cos(np.radians(fov.half_angle_deg))
    v = v_loc / np.linalg.norm(v_loc, axis=-1, keepdims=True)
    c = np.cross(v, n_loc)
    C = np.linalg.norm(c, axis=-1)
    inside = C <= fov.max_range
    smax = np.sqrt(np.maximum(fov.max_range**2 - C**2, 0.0))
    B = v[:, 0]
    ratio = np.clip(B / k, -1.0, 1.0)
    interior = np.abs(B) < k
    s_star = np.where(interior, C * ratio / np.sqrt(np.maximum(1.0 - ratio**2, 1e-300)), np.sign(B) * smax)
    s = np.clip(s_star, -smax, smax)
    x = c + s[:, None] * v
    g = x[:, 0] - k * np.linalg.norm(x, axis=-1)
    return inside & (g >= 0.0)


def visible_planes(n_loc, d_loc, fov):
    """Plane ``n . x = d`` (local) meets the range-limited cone."""
    sign = np.where(d_loc >= 0, 1.0, -1.0)
    n = n_loc * sign[:, None]
    d = np.abs(d_loc)
    theta = np.radians(fov.half_angle_deg)
    phi = np.arccos(np.clip(n[:, 0], -1.0, 1.0))
    gap = np.maximum(phi - theta, 0.0)
    reach = np.where(gap < np.pi / 2, d / np.maximum(np.cos(gap), 1e-300), np.inf)
    return reach <= fov.max_range


def simulate_measurements(states, times, world, fov=FovSpec(), noise=FeatureNoise(), seed=0, frame_indices=None):
    """One frame per ground-truth state with FOV gating and Gaussian noise."""
    rng = np.random.default_rng(seed)
    P = np.array([pt.p for pt in world.points]).reshape(-1, 3)
    Ln = np.array([l.n for l in world.lines]).reshape(-1, 3)
    Lv = np.array([l.v for l in world.lines]).reshape(-1, 3)
    Pn = np.array([n for n, _ in world.planes]).reshape(-1, 3)
    Pd = np.array([d for _, d in world.planes])
    frames = []
    for f, (state, t) in enumerate(zip(states, times)):
        R = state.pose.R
        p = state.pose.p
        frame = MeasurementFrame(float(t), f if frame_indices is None else frame_indices[f])
        if len(P):
            z = (P - p) @ R.T
            vis = visible_points(z, fov)
            noise_p = rng.normal(size=z.shape) * noise.point
            for i in np.flatnonzero(vis):
                frame.points[int(i)] = z[i] + noise_p[i]
        if len(Ln):
            n_loc = (Ln - np.cross(p, Lv)) @ R.T
            v_loc = Lv @ R.T
            vis = visible_lines(n_loc, v_loc, fov) & (np.linalg.norm(n_loc, axis=-1) >= EPS_LINE)
            noise_l = rng.normal(size=(len(Ln), 6)) * noise.line
            for i in np.flatnonzero(vis):
                frame.lines[int(i)] = np.concatenate([n_loc[i], v_loc[i]]) + noise_l[i]
        if len(Pn):
            d_loc = Pd - Pn @ p
            n_loc = Pn @ R.T
            vis = visible_planes(n_loc, d_loc, fov) & (np.abs(d_loc) >= EPS_PLANE)
            noise_pl = rng.normal(size=(len(Pn), 3)) * noise.plane
            for i in np.flatnonzero(vis):
                frame.planes[int(i)] = d_loc[i] * n_loc[i] + noise_pl[i]
        frames.append(frame)
    return frames


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def rotation_angle_deg(R_a, R_b):
    return np.degrees(np.linalg.norm(so3_log(R_a @ R_b.T)))


def evaluate_rmse(estimated, ground_truth, times_est=None, times_gt=None):
    """Translation (m) and rotation (deg) RMSE over matched poses."""
    if len(estimated) != len(ground_truth):
        raise ValueError("trajectories differ in length")
    if times_est is not None and times_gt is not None and not np.allclose(times_est, times_gt):
        raise ValueError("timestamps do not match")
    if not len(estimated):
        return 0.0, 0.0
    pe = np.array([_pose(s).p for s in estimated])
    pg = np.array([_pose(s).p for s in ground_truth])
    trans = float(np.sqrt(np.mean(np.sum((pe - pg) ** 2, axis=1))))
    ang = np.array([rotation_angle_deg(_pose(a).R, _pose(b).R) for a, b in zip(estimated, ground_truth)])
    return trans, float(np.sqrt(np.mean(ang**2)))


def _pose(s):
    return s.pose if hasattr(s, "pose") else s


def trajectory_rows(times, states):
    """Rows ``t, x, y, z, qw, qx, qy, qz`` with the IMU-to-global rotation."""
    rows = []
    for t, s in zip(times, states):
        pose = _pose(s)
        q = pose.q.copy()
        q[1:] = -q[1:]
        if q[0] < 0:
            q = -q
        rows.append([float(t), *map(float, pose.p), *map(float, q)])
    return rows
