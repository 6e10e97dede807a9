"""Frames, minimal parameterizations and retractions for window states.

Conventions
-----------
* Quaternions are Hamilton, stored ``(w, x, y, z)``.
* ``Pose.q`` rotates global vectors into the IMU frame (``R = R(q)`` maps
  ``G -> I``); ``Pose.p`` is the IMU position in the global frame.
* Rotation perturbations are right-multiplicative: ``R <- R @ Exp(dtheta)``.
* A line closest point is ``d * (v_bar x n_bar)``.
* A plane ``(n, d)`` contains the points ``x`` with ``n @ x = d``.

All helpers accept a leading batch dimension where noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_LINE = 1e-6
EPS_PLANE = 1e-6
_SMALL_ANGLE = 1e-8


class DegenerateLine(ValueError):
    """Line passes (numerically) through the origin of its frame."""


class DegeneratePlane(ValueError):
    """Plane passes (numerically) through the origin of its frame."""


# ---------------------------------------------------------------------------
# SO(3) / quaternion helpers
# ---------------------------------------------------------------------------


def skew(v):
    """Cross-product matrix; works on ``(..., 3)`` arrays."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q):
    """Normalize and flip to ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_to_rot(q):
    """Rotation matrix of a unit quaternion, batched over leading dims."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = w * w + x * x - y * y - z * z
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = w * w - x * x + y * y - z * z
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = w * w - x * x - y * y + z * z
    return out


def rot_to_quat(R):
    """Quaternion ``(w, x, y, z)`` with ``w >= 0`` from rotation matrices."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    # four candidate (unnormalized) quaternions; pick the best conditioned
    cands = np.stack(
        [
            np.stack([1.0 + m00 + m11 + m22, R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1),
            np.stack([R[..., 2, 1] - R[..., 1, 2], 1.0 + m00 - m11 - m22, R[..., 0, 1] + R[..., 1, 0], R[..., 0, 2] + R[..., 2, 0]], -1),
            np.stack([R[..., 0, 2] - R[..., 2, 0], R[..., 0, 1] + R[..., 1, 0], 1.0 - m00 + m11 - m22, R[..., 1, 2] + R[..., 2, 1]], -1),
            np.stack([R[..., 1, 0] - R[..., 0, 1], R[..., 0, 2] + R[..., 2, 0], R[..., 1, 2] + R[..., 2, 1], 1.0 - m00 - m11 + m22], -1),
        ],
        -2,
    )
    diag = np.stack([1.0 + m00 + m11 + m22, 1.0 + m00 - m11 - m22, 1.0 - m00 + m11 - m22, 1.0 - m00 - m11 + m22], -1)
    best = np.argmax(diag, axis=-1)
    q = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    return quat_canonical(q)


def quat_exp(phi):
    """Quaternion of the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * phi], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion (shortest rotation)."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    small = nv < _SMALL_ANGLE
    safe = np.where(small, 1.0, nv)
    w_safe = np.clip(w, 1e-300, None)
    k = np.where(small, 2.0 / w_safe * (1.0 - nv**2 / (3.0 * w_safe**2)), 2.0 * np.arctan2(nv, w) / safe)
    return k * v


def so3_exp(phi):
    """Rodrigues formula, batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of a rotation matrix."""
    return quat_log(rot_to_quat(R))


def right_jacobian(phi):
    """SO(3) right Jacobian ``Jr`` so that ``Exp(phi + d) ~ Exp(phi) Exp(Jr d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3) - a * K + b * (K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return np.eye(3) + 0.5 * K + c * (K @ K)


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------


def _vec(x, n):
    a = np.array(x, dtype=float).reshape(n)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    DIM = 6

    def __post_init__(self):
        object.__setattr__(self, "q", _vec(quat_canonical(self.q), 4))
        object.__setattr__(self, "p", _vec(self.p, 3))

    @property
    def R(self):
        """Rotation global -> IMU."""
        return quat_to_rot(self.q)

    def inverse(self):
        """Pose of the global origin seen from this pose's frame."""
        return Pose(quat_conj(self.q), -self.R @ self.p)

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (6,):
            raise ValueError(f"Pose tangent has 6 dims, got {delta.shape}")
        if not delta.any():
            return self
        return Pose(quat_mul(self.q, quat_exp(delta[:3])), self.p + delta[3:])

    def boxminus(self, other):
        return np.concatenate([quat_log(quat_mul(quat_conj(other.q), self.q)), self.p - other.p])


@dataclass(frozen=True)
class ImuState:
    """Tangent layout: ``(dtheta, dp, dv, dbg, dba)``."""

    pose: Pose = field(default_factory=Pose)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    DIM = 15

    def __post_init__(self):
        object.__setattr__(self, "v", _vec(self.v, 3))
        object.__setattr__(self, "bg", _vec(self.bg, 3))
        object.__setattr__(self, "ba", _vec(self.ba, 3))

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (15,):
            raise ValueError(f"ImuState tangent has 15 dims, got {delta.shape}")
        return ImuState(
            self.pose.boxplus(delta[:6]),
            self.v + delta[6:9],
            self.bg + delta[9:12],
            self.ba + delta[12:15],
        )

    def boxminus(self, other):
        return np.concatenate(
            [self.pose.boxminus(other.pose), self.v - other.v, self.bg - other.bg, self.ba - other.ba]
        )


@dataclass(frozen=True)
class PlueckerLine:
    n: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", _vec(self.n, 3))
        object.__setattr__(self, "v", _vec(self.v, 3))

    @classmethod
    def from_points(cls, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(np.cross(a, b), b - a)

    @property
    def vector(self):
        return np.concatenate([self.n, self.v])

    def normalized(self):
        s = np.linalg.norm(self.v)
        return PlueckerLine(self.n / s, self.v / s)

    def closest_point(self):
        s = np.linalg.norm(self.v)
        return np.cross(self.v, self.n) / s**2

    def distance_to(self, x):
        """Euclidean distance of point ``x`` to the line."""
        line = self.normalized()
        return float(np.linalg.norm(np.cross(np.asarray(x, dtype=float), line.v) - line.n))


@dataclass(frozen=True)
class LineCP:
    """Closest-point line state ``x = d * q`` (4 scalars, additive tangent)."""

    x: np.ndarray

    DIM = 4

    def __post_init__(self):
        object.__setattr__(self, "x", _vec(self.x, 4))

    @classmethod
    def from_qd(cls, q, d):
        return cls(float(d) * quat_canonical(q))

    @property
    def d(self):
        return float(np.linalg.norm(self.x))

    @property
    def q(self):
        # a zero-distance line has no recoverable orientation; pick identity so n = 0
        norm = np.linalg.norm(self.x)
        if norm == 0.0:
            return np.array([1.0, 0.0, 0.0, 0.0])
        return self.x / norm

    @property
    def R(self):
        return quat_to_rot(self.q)

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (4,):
            raise ValueError(f"LineCP tangent has 4 dims, got {delta.shape}")
        return LineCP(self.x + delta)

    def boxminus(self, other):
        return self.x - other.x


@dataclass(frozen=True)
class PlaneCP:
    """Closest point ``d * n`` of a plane to the origin."""

    cp: np.ndarray

    DIM = 3

    def __post_init__(self):
        object.__setattr__(self, "cp", _vec(self.cp, 3))

    @classmethod
    def from_nd(cls, n, d):
        n = np.asarray(n, dtype=float)
        return cls(float(d) * n / np.linalg.norm(n))

    def unpack(self):
        """Return ``(n, d)`` with unit ``n`` and ``d > 0``."""
        d = float(np.linalg.norm(self.cp))
        if d < EPS_PLANE:
            raise DegeneratePlane(f"plane closest point norm {d:.3g} below {EPS_PLANE}")
        return self.cp / d, d

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (3,):
            raise ValueError(f"PlaneCP tangent has 3 dims, got {delta.shape}")
        return PlaneCP(self.cp + delta)

    def boxminus(self, other):
        return self.cp - other.cp


@dataclass(frozen=True)
class Point3:
    p: np.ndarray

    DIM = 3

    def __post_init__(self):
        object.__setattr__(self, "p", _vec(self.p, 3))

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (3,):
            raise ValueError(f"Point3 tangent has 3 dims, got {delta.shape}")
        return Point3(self.p + delta)

    def boxminus(self, other):
        return self.p - other.p


def boxplus(x, delta):
    """Retract any state type (including a full window state)."""
    return x.boxplus(delta)


def boxminus(x, y):
    return x.boxminus(y)


# ---------------------------------------------------------------------------
# Conversions
# ---------------------------------------------------------------------------


def pluecker_to_cp(line):
    n = np.asarray(line.n, dtype=float)
    v = np.asarray(line.v, dtype=float)
    nn = np.linalg.norm(n)
    nv = np.linalg.norm(v)
    if nv < EPS_LINE:
        raise DegenerateLine(f"direction norm {nv:.3g} below {EPS_LINE}")
    if nn / nv < EPS_LINE:
        raise DegenerateLine(f"line passes within {nn / nv:.3g} m of the origin")
    nb = n / nn
    vb = v / nv
    # re-orthogonalize against rounding in the input
    nb = nb - (nb @ vb) * vb
    nb /= np.linalg.norm(nb)
    R = np.column_stack([nb, vb, np.cross(nb, vb)])
    return LineCP.from_qd(rot_to_quat(R), nn / nv)


def cp_to_pluecker(cp):
    R = cp.R
    return PlueckerLine(cp.d * R[:, 0], R[:, 1])


def transform_line(pose, line):
    """Express a global Pluecker line in the IMU frame of ``pose``."""
    R = pose.R
    return PlueckerLine(R @ (line.n - np.cross(pose.p, line.v)), R @ line.v)


def transform_line_to_global(pose, line):
    R = pose.R
    v = R.T @ line.v
    return PlueckerLine(R.T @ line.n + np.cross(pose.p, v), v)


def transform_plane(pose, n, d):
    """Global plane ``(n, d)`` -> local ``(n, d)``."""
    n = np.asarray(n, dtype=float)
    return pose.R @ n, float(d - pose.p @ n)


def transform_plane_to_global(pose, n, d):
    n_g = pose.R.T @ np.asarray(n, dtype=float)
    return n_g, float(d + pose.p @ n_g)


def transform_point(pose, x):
    return pose.R @ (np.asarray(x, dtype=float) - pose.p)


def transform_point_to_global(pose, z):
    return pose.R.T @ np.asarray(z, dtype=float) + pose.p


# ---------------------------------------------------------------------------
# Closest-point line kinematics (batched)
# ---------------------------------------------------------------------------


def line_cp_local_jacobian(x):
    """Map from ``dx`` (additive on ``x = d q``) to ``(dtheta, dd)``.

    ``q(x + dx) ~ q(x) Exp(dtheta)`` with a right perturbation. Shape
    ``(..., 4, 4)``; rows ``(dtheta, dd)``, columns ``(w, x, y, z)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.sqrt(np.einsum("...i,...i->...", x, x))
    q = x / d[..., None]
    w, a, b, c = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(x.shape[:-1] + (4, 4))
    k = 2.0 / d
    # rows (dtheta, dd): 2/d [-qv, w I - [qv]x] and q
    out[..., 0, :] = np.stack([-a, w, c, -b], axis=-1) * k[..., None]
    out[..., 1, :] = np.stack([-b, -c, w, a], axis=-1) * k[..., None]
    out[..., 2, :] = np.stack([-c, b, -a, w], axis=-1) * k[..., None]
    out[..., 3, :] = q
    return out


def line_cp_geometry(x):
    """Unit normal direction, unit direction, distance and Jacobians.

    Returns ``n`` (= d * n_bar), ``v`` (unit), closest point ``c`` and their
    Jacobians w.r.t. the 4-vector ``x`` (shape ``(..., 3, 4)`` each), plus
    ``nb``, ``u = nb x v`` and ``d`` with Jacobians.
    """
    x = np.asarray(x, dtype=float)
    d = np.sqrt(np.einsum("...i,...i->...", x, x))
    R = quat_to_rot(x / d[..., None])
    e1 = R[..., :, 0]
    e2 = R[..., :, 1]
    e3 = R[..., :, 2]
    L = line_cp_local_jacobian(x)
    z = np.zeros_like(e1)
    dv3 = d[..., None]
    # R [a]x columns for the basis vectors: [e1]x -> (0, e3, -e2),
    # [e2]x -> (-e3, 0, e1), [e3]x -> (e2, -e1, 0)
    # n = d R e1 ; v = R e2 ; c = d (v x n_bar) = -d R e3
    D = np.stack(
        [
            np.stack([z, -dv3 * e3, dv3 * e2, e1], axis=-1),  # n
            np.stack([e3, z, -e1, z], axis=-1),  # v
            np.stack([dv3 * e2, -dv3 * e1, z, -e3], axis=-1),  # c
            np.stack([z, -e3, e2, z], axis=-1),  # n_bar
            np.stack([-e2, e1, z, z], axis=-1),  # u
        ],
        axis=-3,
    )
    J = D @ L[..., None, :, :]
    return {
        "d": d,
        "n": dv3 * e1,
        "v": e2,
        "nb": e1,
        "c": -dv3 * e3,
        "R": R,
        "J_n": J[..., 0, :, :],
        "J_v": J[..., 1, :, :],
        "J_c": J[..., 2, :, :],
        "u": e3,
        "J_nb": J[..., 3, :, :],
        "J_u": J[..., 4, :, :],
        "J_d": L[..., 3, :],
    }


def plane_cp_geometry(cp):
    """Unit normal, distance and Jacobians w.r.t. the closest point."""
    cp = np.asarray(cp, dtype=float)
    d = np.linalg.norm(cp, axis=-1)
    # d = 0 yields NaN rows; callers drop those as degenerate
    with np.errstate(invalid="ignore", divide="ignore"):
        n = cp / d[..., None]
        J_n = (np.eye(3) - n[..., :, None] * n[..., None, :]) / d[..., None, None]
    return {"n": n, "d": d, "J_n": J_n, "J_d": n}


# ---------------------------------------------------------------------------
# Window state
# ---------------------------------------------------------------------------

FAMILY_DIMS = {"imu": 15, "point": 3, "line": 4, "plane": 3}
_FAMILY_ORDER = ("imu", "point", "line", "plane")


@dataclass
class SlidingWindowState:
    """Ordered variable set of one window.

    Variables are keyed ``(family, id)``. The tangent layout is all IMU
    states, then points, lines and planes, each in insertion order.
    """

    imu: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    planes: dict = field(default_factory=dict)

    _ATTR = {"imu": "imu", "point": "points", "line": "lines", "plane": "planes"}

    def _table(self, family):
        return getattr(self, self._ATTR[family])

    def keys(self):
        return [(fam, k) for fam in _FAMILY_ORDER for k in self._table(fam)]

    def __contains__(self, key):
        fam, k = key
        return k in self._table(fam)

    def __getitem__(self, key):
        return getattr(self, self._ATTR[key[0]])[key[1]]

    def __setitem__(self, key, value):
        fam, k = key
        self._table(fam)[k] = value

    def remove(self, key):
        fam, k = key
        del self._table(fam)[k]

    def copy(self):
        return SlidingWindowState(dict(self.imu), dict(self.points), dict(self.lines), dict(self.planes))

    def subset(self, keys):
        out = SlidingWindowState()
        for key in self.keys():
            if key in keys:
                out[key] = self[key]
        return out

    def layout(self):
        """Map key -> (offset, dim) and the total tangent dimension."""
        offsets = {}
        off = 0
        for key in self.keys():
            dim = FAMILY_DIMS[key[0]]
            offsets[key] = (off, dim)
            off += dim
        return offsets, off

    @property
    def dim(self):
        return (
            15 * len(self.imu) + 3 * len(self.points) + 4 * len(self.lines) + 3 * len(self.planes)
        )

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (self.dim,):
            raise ValueError(f"window tangent has {self.dim} dims, got {delta.shape}")
        out = SlidingWindowState()
        off = 0
        for key in self.keys():
            dim = FAMILY_DIMS[key[0]]
            out[key] = self[key].boxplus(delta[off : off + dim])
            off += dim
        return out

    def boxminus(self, other):
        """Tangent difference ``self [-] other`` over ``other``'s variables."""
        return np.concatenate([self[key].boxminus(other[key]) for key in other.keys()]) if other.keys() else np.zeros(0)
