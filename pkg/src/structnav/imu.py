"""IMU preintegration and the relative-motion factor between window states.

Each sample ``(gyro, accel, dt)`` is held constant over its ``dt``. The
rotation is integrated exactly for that constant rate; velocity and
position use the rotation at the middle of the step. Gravity never enters
the deltas, it is applied inside the factor.

Residual layout: ``(dtheta, dv, dp, dbg, dba)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factors import FactorEvaluation
from .geometry import ImuState, Pose, quat_to_rot, right_jacobian, right_jacobian_inv, rot_to_quat, skew, so3_exp, so3_log

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time densities."""

    gyro_white: float = 1e-3
    accel_white: float = 2e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 3e-4


@dataclass
class PreintegratedImu:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt: float
    bg0: np.ndarray
    ba0: np.ndarray
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    cov: np.ndarray

    @property
    def dq(self):
        return rot_to_quat(self.dR)

    def corrected(self, bg, ba):
        """First-order bias-corrected deltas."""
        dbg = np.asarray(bg) - self.bg0
        dba = np.asarray(ba) - self.ba0
        dR = self.dR @ so3_exp(self.J_R_bg @ dbg)
        dv = self.dv + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dp = self.dp + self.J_p_bg @ dbg + self.J_p_ba @ dba
        return dR, dv, dp


def imu_preintegrate(samples, bias=(np.zeros(3), np.zeros(3)), noise=ImuNoise()):
    """Compound raw samples into one relative-motion measurement."""
    samples = list(samples)
    if not samples:
        raise ValueError("preintegration needs at least one sample")
    bg0 = np.asarray(bias[0], dtype=float).copy()
    ba0 = np.asarray(bias[1], dtype=float).copy()
    gyro = np.array([s[0] for s in samples], dtype=float)
    accel = np.array([s[1] for s in samples], dtype=float)
    dts = np.array([s[2] for s in samples], dtype=float)
    if np.any(dts <= 0.0):
        raise ValueError("sample dt must be positive")

    w = gyro - bg0
    a = accel - ba0
    E_all = so3_exp(w * dts[:, None])
    E_half_all = so3_exp(w * (0.5 * dts)[:, None])
    Jr_all = right_jacobian(w * dts[:, None])
    Jr_half_all = right_jacobian(w * (0.5 * dts)[:, None])
    a_skew = skew(a)
    Q_g = noise.gyro_white**2 / dts
    Q_a = noise.accel_white**2 / dts

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_R = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    cov = np.zeros((9, 9))  # (dtheta, dv, dp)
    A = np.eye(9)
    B = np.zeros((9, 6))

    for k in range(len(dts)):
        dt = dts[k]
        E, E_half, Jr, Jr_half = E_all[k], E_half_all[k], Jr_all[k], Jr_half_all[k]
        R_mid = dR @ E_half
        Ra_skew = R_mid @ a_skew[k]

        # bias Jacobians: exact derivatives of this discrete scheme
        J_R_mid = E_half.T @ J_R - Jr_half * (0.5 * dt)
        J_pg = J_pg + J_vg * dt - 0.5 * Ra_skew @ J_R_mid * dt**2
        J_pa = J_pa + J_va * dt - 0.5 * R_mid * dt**2
        J_vg = J_vg - Ra_skew @ J_R_mid * dt
        J_va = J_va - R_mid * dt
        J_R = E.T @ J_R - Jr * dt

        # noise propagation
        RaE = Ra_skew @ E_half.T
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = -RaE * dt
        A[6:9, 0:3] = -0.5 * RaE * dt**2
        A[6:9, 3:6] = np.eye(3) * dt
        RaJ = Ra_skew @ Jr_half * (0.5 * dt)
        B[0:3, 0:3] = -Jr * dt
        B[3:6, 0:3] = RaJ * dt
        B[6:9, 0:3] = 0.5 * RaJ * dt**2
        B[3:6, 3:6] = -R_mid * dt
        B[6:9, 3:6] = -0.5 * R_mid * dt**2
        cov = A @ cov @ A.T + (B[:, :3] * Q_g[k]) @ B[:, :3].T + (B[:, 3:] * Q_a[k]) @ B[:, 3:].T

        acc = R_mid @ a[k]
        dp = dp + dv * dt + 0.5 * acc * dt**2
        dv = dv + acc * dt
        dR = dR @ E

    total = float(dts.sum())
    full = np.zeros((15, 15))
    full[:9, :9] = cov
    full[9:12, 9:12] = np.eye(3) * max(noise.gyro_walk**2 * total, 1e-18)
    full[12:15, 12:15] = np.eye(3) * max(noise.accel_walk**2 * total, 1e-18)
    # keep strictly positive definite for the zero-noise configuration
    full[:9, :9] += np.eye(9) * 1e-18
    return PreintegratedImu(dR, dv, dp, total, bg0, ba0, J_R, J_vg, J_va, J_pg, J_pa, 0.5 * (full + full.T))


def propagate(state, pre, gravity=GRAVITY):
    """Predict the next state from ``state`` and a preintegrated measurement."""
    R_wb = state.pose.R.T
    dR, dv, dp = pre.corrected(state.bg, state.ba)
    T = pre.dt
    p = state.pose.p + state.v * T + 0.5 * gravity * T**2 + R_wb @ dp
    v = state.v + gravity * T + R_wb @ dv
    R_new = R_wb @ dR
    return ImuState(Pose(rot_to_quat(R_new.T), p), v, state.bg, state.ba)


def imu_model(si, sj, pre, gravity=GRAVITY):
    """Batched residuals and Jacobians.

    ``si``/``sj`` are dicts of stacked arrays (q, p, v, bg, ba); ``pre`` a dict
    of stacked preintegration fields. Returns r (N,15), J_i, J_j (N,15,15).
    """
    N = len(si["q"])
    Ri = quat_to_rot(si["q"])
    Rj = quat_to_rot(sj["q"])
    T = pre["dt"]
    dbg = si["bg"] - pre["bg0"]
    dba = si["ba"] - pre["ba0"]
    phi = np.einsum("nij,nj->ni", pre["J_R_bg"], dbg)
    dR = pre["dR"] @ so3_exp(phi)
    dv = pre["dv"] + np.einsum("nij,nj->ni", pre["J_v_bg"], dbg) + np.einsum("nij,nj->ni", pre["J_v_ba"], dba)
    dp = pre["dp"] + np.einsum("nij,nj->ni", pre["J_p_bg"], dbg) + np.einsum("nij,nj->ni", pre["J_p_ba"], dba)
    RiRjT = Ri @ np.swapaxes(Rj, 1, 2)
    r_R = so3_log(np.swapaxes(dR, 1, 2) @ RiRjT)
    u_v = sj["v"] - si["v"] - gravity * T[:, None]
    u_p = sj["p"] - si["p"] - si["v"] * T[:, None] - 0.5 * gravity * (T**2)[:, None]
    r = np.concatenate(
        [
            r_R,
            np.einsum("nij,nj->ni", Ri, u_v) - dv,
            np.einsum("nij,nj->ni", Ri, u_p) - dp,
            sj["bg"] - si["bg"],
            sj["ba"] - si["ba"],
        ],
        axis=1,
    )
    Jr_inv = right_jacobian_inv(r_R)
    E_res = so3_exp(r_R)
    I3 = np.eye(3)
    Ji = np.zeros((N, 15, 15))
    Jj = np.zeros((N, 15, 15))
    # columns: (dtheta 0:3, dp 3:6, dv 6:9, dbg 9:12, dba 12:15)
    JRj = Jr_inv @ Rj
    Ji[:, 0:3, 0:3] = JRj
    Jj[:, 0:3, 0:3] = -JRj
    Ji[:, 0:3, 9:12] = -Jr_inv @ np.swapaxes(E_res, 1, 2) @ right_jacobian(phi) @ pre["J_R_bg"]
    Ji[:, 3:6, 0:3] = -Ri @ skew(u_v)
    Ji[:, 3:6, 6:9] = -Ri
    Jj[:, 3:6, 6:9] = Ri
    Ji[:, 3:6, 9:12] = -pre["J_v_bg"]
    Ji[:, 3:6, 12:15] = -pre["J_v_ba"]
    Ji[:, 6:9, 0:3] = -Ri @ skew(u_p)
    Ji[:, 6:9, 3:6] = -Ri
    Jj[:, 6:9, 3:6] = Ri
    Ji[:, 6:9, 6:9] = -Ri * T[:, None, None]
    Ji[:, 6:9, 9:12] = -pre["J_p_bg"]
    Ji[:, 6:9, 12:15] = -pre["J_p_ba"]
    Ji[:, 9:12, 9:12] = -I3
    Jj[:, 9:12, 9:12] = I3
    Ji[:, 12:15, 12:15] = -I3
    Jj[:, 12:15, 12:15] = I3
    return r, Ji, Jj


_PRE_FIELDS = ("dR", "dv", "dp", "dt", "bg0", "ba0", "J_R_bg", "J_v_bg", "J_v_ba", "J_p_bg", "J_p_ba")


def stack_states(states):
    return {
        "q": np.array([s.pose.q for s in states]),
        "p": np.array([s.pose.p for s in states]),
        "v": np.array([s.v for s in states]),
        "bg": np.array([s.bg for s in states]),
        "ba": np.array([s.ba for s in states]),
    }


def stack_preintegrations(pres):
    return {f: np.array([getattr(p, f) for p in pres]) for f in _PRE_FIELDS}


def imu_factor(state_m, state_m1, pre, gravity=GRAVITY):
    """15-dim residual and Jacobians w.r.t. both ImuStates (15 columns each)."""
    r, Ji, Jj = imu_model(stack_states([state_m]), stack_states([state_m1]), stack_preintegrations([pre]), gravity)
    return FactorEvaluation(r[0], {"state_m": Ji[0], "state_m1": Jj[0]})
