import numpy as np

from structnav.geometry import ImuState, LineCP, PlaneCP, Point3, Pose, quat_exp

STEP = 1e-6


def numeric_jacobian(f, x, dim, step=STEP):
    """Central differences of ``f(x [+] delta)`` around ``delta = 0``."""
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = step
        cols.append((np.asarray(f(x.boxplus(e))) - np.asarray(f(x.boxplus(-e)))) / (2 * step))
    return np.stack(cols, axis=-1)


def rel_err(J, J_fd):
    return np.linalg.norm(J - J_fd) / max(np.linalg.norm(J_fd), 1.0)


def random_pose(rng, spread=3.0):
    return Pose(quat_exp(rng.normal(size=3)), rng.uniform(-spread, spread, 3))


def random_imu_state(rng):
    return ImuState(random_pose(rng), rng.normal(size=3), 0.01 * rng.normal(size=3), 0.1 * rng.normal(size=3))


def random_line(rng):
    q = rng.normal(size=4)
    return LineCP.from_qd(q / np.linalg.norm(q), rng.uniform(0.5, 5.0))


def random_plane(rng):
    n = rng.normal(size=3)
    return PlaneCP.from_nd(n / np.linalg.norm(n), rng.uniform(0.5, 5.0))


def random_point(rng):
    return Point3(rng.uniform(-5, 5, 3))


def noiseless_run(duration=2.0, rate=200.0, frame_rate=10.0, world=None):
    """World, IMU, ground-truth states and frames of a zero-noise trajectory."""
    from structnav.simulator import (
        FeatureNoise,
        ImuSpec,
        WorldSpec,
        generate_trajectory,
        generate_world,
        integrate_ground_truth,
        loop_waypoints,
        simulate_imu,
        simulate_measurements,
    )

    world = world or generate_world(WorldSpec())
    traj = generate_trajectory(loop_waypoints(), 60.0, rate)
    traj.duration = duration
    imu = simulate_imu(traj, ImuSpec(0.0, 0.0, 0.0, 0.0, rate), seed=0)
    stride = int(round(rate / frame_rate))
    gt = integrate_ground_truth(traj, imu, stride)
    times = imu.t[::stride][: len(gt)]
    frames = simulate_measurements(gt, times, world, noise=FeatureNoise(0.0, 0.0, 0.0), seed=0)
    return world, imu, stride, gt, frames
