"""Point, line and plane measurement factors and the linear prior factor.

Every model is written over a leading batch axis so the solver can
evaluate a whole factor family at once; the single-factor functions
(`point_factor`, `line_factor`, ...) are thin wrappers around those.

Pose Jacobians are 6 columns wide, ordered ``(dtheta, dp)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EPS_LINE,
    EPS_PLANE,
    DegenerateLine,
    DegeneratePlane,
    FAMILY_DIMS,
    line_cp_geometry,
    plane_cp_geometry,
    quat_conj,
    quat_log,
    quat_mul,
    quat_to_rot,
    right_jacobian_inv,
    skew,
)


def _spd(sigma, n):
    sigma = np.array(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = sigma * np.eye(n)
    if sigma.shape != (n, n):
        raise ValueError(f"expected {n}x{n} covariance, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T) or np.linalg.eigvalsh(sigma).min() <= 0.0:
        raise ValueError("covariance must be symmetric positive definite")
    return sigma


def sqrt_information(sigma):
    """Upper factor ``W`` with ``W.T @ W = inv(sigma)``."""
    L = np.linalg.cholesky(np.linalg.inv(sigma))
    return L.T


@dataclass(frozen=True)
class PointMeasurement:
    z: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(3))
        object.__setattr__(self, "sigma", _spd(self.sigma, 3))


@dataclass(frozen=True)
class LineMeasurement:
    """Local Pluecker coordinates ``(n, v)``, scaled so that ``|v| = 1``."""

    z: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(6)
        z = z / np.linalg.norm(z[3:])
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "sigma", _spd(self.sigma, 6))


@dataclass(frozen=True)
class PlaneMeasurement:
    """Closest point of the plane in the local frame."""

    z: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(3)
        if np.linalg.norm(z) < EPS_PLANE:
            raise DegeneratePlane("plane measurement passes through the sensor")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "sigma", _spd(self.sigma, 3))


@dataclass
class FactorEvaluation:
    residual: np.ndarray
    jacobians: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Batched models
# ---------------------------------------------------------------------------


def point_model(q, p, pt, z):
    """Residual ``R (pt - p) - z`` with Jacobians (pose, point)."""
    R = quat_to_rot(q)
    diff = pt - p
    r = np.einsum("nij,nj->ni", R, diff) - z
    J_pose = np.concatenate([-R @ skew(diff), -R], axis=-1)
    return r, J_pose, R


def line_model(q, p, x, z):
    """Local Pluecker residual; returns (r, J_pose, J_line, local_normal_norm)."""
    R = quat_to_rot(q)
    g = line_cp_geometry(x)
    m = g["n"] - np.cross(p, g["v"])
    n_loc = np.einsum("nij,nj->ni", R, m)
    v_loc = np.einsum("nij,nj->ni", R, g["v"])
    r = np.concatenate([n_loc, v_loc], axis=-1) - z
    N = len(q)
    J_pose = np.zeros((N, 6, 6))
    J_pose[:, :3, :3] = -R @ skew(m)
    J_pose[:, 3:, :3] = -R @ skew(g["v"])
    J_pose[:, :3, 3:] = R @ skew(g["v"])
    J_line = np.concatenate([R @ (g["J_n"] - skew(p) @ g["J_v"]), R @ g["J_v"]], axis=1)
    return r, J_pose, J_line, np.linalg.norm(n_loc, axis=-1)


def plane_model(q, p, cp, z):
    """Local closest-point residual; returns (r, J_pose, J_plane, local_norm)."""
    R = quat_to_rot(q)
    g = plane_cp_geometry(cp)
    n = g["n"]
    d_loc = g["d"] - np.einsum("ni,ni->n", p, n)
    Rn = np.einsum("nij,nj->ni", R, n)
    pred = d_loc[:, None] * Rn
    r = pred - z
    dn = R * d_loc[:, None, None] - Rn[:, :, None] * p[:, None, :]
    J_plane = dn @ g["J_n"] + Rn[:, :, None] * g["J_d"][:, None, :]
    J_pose = np.concatenate(
        [-d_loc[:, None, None] * (R @ skew(n)), -Rn[:, :, None] * n[:, None, :]], axis=-1
    )
    return r, J_pose, J_plane, np.abs(d_loc)


# ---------------------------------------------------------------------------
# Single-factor API
# ---------------------------------------------------------------------------


def point_factor(pose, point, m):
    r, J_pose, R = point_model(pose.q[None], pose.p[None], point.p[None], m.z[None])
    return FactorEvaluation(r[0], {"pose": J_pose[0], "point": R[0]})


def line_factor(pose, line, m):
    r, J_pose, J_line, n_loc = line_model(pose.q[None], pose.p[None], line.x[None], m.z[None])
    if n_loc[0] < EPS_LINE:
        raise DegenerateLine("line passes through the sensor origin")
    return FactorEvaluation(r[0], {"pose": J_pose[0], "line": J_line[0]})


def plane_factor(pose, plane, m):
    if np.linalg.norm(plane.cp) < EPS_PLANE:
        raise DegeneratePlane("plane passes through the global origin")
    r, J_pose, J_plane, d_loc = plane_model(pose.q[None], pose.p[None], plane.cp[None], m.z[None])
    if d_loc[0] < EPS_PLANE:
        raise DegeneratePlane("plane passes through the sensor origin")
    return FactorEvaluation(r[0], {"pose": J_pose[0], "plane": J_plane[0]})


# ---------------------------------------------------------------------------
# Tangent-space differences
# ---------------------------------------------------------------------------


def tangent_difference(value, anchor):
    """``value [-] anchor`` and its Jacobian w.r.t. a perturbation of value."""
    if hasattr(value, "pose"):
        dtheta = quat_log(quat_mul(quat_conj(anchor.pose.q), value.pose.q))
        J = np.eye(15)
        J[:3, :3] = right_jacobian_inv(dtheta)
        return value.boxminus(anchor), J
    delta = value.boxminus(anchor)
    return delta, np.eye(len(delta))


def prior_factor(x, mean, P_p=None):
    """Residual ``x [-] mean`` over the variables of ``mean``.

    ``P_p`` is accepted for interface symmetry; weighting happens in the
    solver. The Jacobian is the identity at ``x == mean``.
    """
    parts = []
    jac = {}
    offsets, dim = mean.layout()
    for key in mean.keys():
        delta, J = tangent_difference(x[key], mean[key])
        off, d = offsets[key]
        block = np.zeros((dim, d))
        block[off : off + d] = J
        jac[key] = block
        parts.append(delta)
    r = np.concatenate(parts) if parts else np.zeros(0)
    return FactorEvaluation(r, jac)


def key_dim(key):
    return FAMILY_DIMS[key[0]]
