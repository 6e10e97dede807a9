"""Scalar structure priors between pairs of features.

A prior is one scalar relation (a distance or a direction cosine) between
two primitives, stored in a database extracted offline and attached
online to feature pairs whose current estimate lands close to a stored
value. Residuals are always ``h(x_a, x_b) - z``.

Closed-form models are written over a batch axis and take the raw
parameter vectors of each family (point ``p``, line ``x = d q``, plane
``cp = d n``). All feature tangents are additive, so their Jacobians are
taken directly w.r.t. those vectors.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations

import numpy as np

from .geometry import LineCP, PlaneCP, PlueckerLine, Point3, line_cp_geometry, plane_cp_geometry, pluecker_to_cp

TAU_PARALLEL = 1e-3
SIGMA_FLOOR = 1e-3
# distances use |x|^2 / sqrt(|x|^2 + eps^2): differentiable and exactly 0 at
# x = 0, equal to |x| to machine precision once |x| >> eps
_EPS_NORM = 1e-9
_MIN_SEPARATION = 1e-9


class DegeneratePair(ValueError):
    pass


class ExtractionRejected(ValueError):
    def __init__(self, kind, clusters):
        self.kind = kind
        self.clusters = clusters
        spans = ", ".join(f"[{lo:.6g}, {hi:.6g}]" for lo, hi in clusters)
        super().__init__(f"{kind.value}: clusters wider than tolerance: {spans}")


class PriorKind(str, Enum):
    POINT_POINT_DIST = "PointPointDist"
    POINT_LINE_DIST = "PointLineDist"
    POINT_PLANE_DIST = "PointPlaneDist"
    LINE_LINE_ANGLE = "LineLineAngle"
    LINE_LINE_DIST = "LineLineDist"
    LINE_PLANE_ANGLE = "LinePlaneAngle"
    LINE_PLANE_DIST = "LinePlaneDist"
    PLANE_PLANE_ANGLE = "PlanePlaneAngle"
    PLANE_PLANE_DIST = "PlanePlaneDist"
    # distance between non-parallel lines, off unless asked for
    LINE_LINE_SKEW_DIST = "LineLineSkewDist"

    @property
    def is_angle(self):
        return self.value.endswith("Angle")

    @property
    def families(self):
        return _KIND_FAMILIES[self]


_KIND_FAMILIES = {
    PriorKind.POINT_POINT_DIST: ("point", "point"),
    PriorKind.POINT_LINE_DIST: ("point", "line"),
    PriorKind.POINT_PLANE_DIST: ("point", "plane"),
    PriorKind.LINE_LINE_ANGLE: ("line", "line"),
    PriorKind.LINE_LINE_DIST: ("line", "line"),
    PriorKind.LINE_LINE_SKEW_DIST: ("line", "line"),
    PriorKind.LINE_PLANE_ANGLE: ("line", "plane"),
    PriorKind.LINE_PLANE_DIST: ("line", "plane"),
    PriorKind.PLANE_PLANE_ANGLE: ("plane", "plane"),
    PriorKind.PLANE_PLANE_DIST: ("plane", "plane"),
}

STANDARD_KINDS = tuple(k for k in PriorKind if k is not PriorKind.LINE_LINE_SKEW_DIST)
DEFAULT_KINDS = tuple(k for k in STANDARD_KINDS if k is not PriorKind.POINT_POINT_DIST)


@dataclass(frozen=True)
class StructurePrior:
    kind: PriorKind
    value: float
    sigma: float
    support: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("prior sigma must be positive")
        if self.kind.is_angle and not -1.0 - 1e-12 <= self.value <= 1.0 + 1e-12:
            raise ValueError(f"cosine prior {self.value} outside [-1, 1]")


@dataclass(frozen=True)
class AssociatedPriorFactor:
    kind: PriorKind
    a: tuple
    b: tuple
    prior: StructurePrior

    @property
    def pair(self):
        return (self.a, self.b)


# ---------------------------------------------------------------------------
# Batched measurement models: each returns (h, J_a, J_b)
# ---------------------------------------------------------------------------


def _soft_norm(x):
    """Regularized norm and the scale ``g`` with ``d(norm)/dx = g x``."""
    sq = np.einsum("...i,...i->...", x, x)
    r = np.sqrt(sq + _EPS_NORM**2)
    return sq / r, (sq + 2 * _EPS_NORM**2) / r**3


def h_point_point(pa, pb):
    delta = pb - pa
    dist, g = _soft_norm(delta)
    J = g[:, None] * delta
    return dist, -J, J


def h_point_line(p, x):
    g = line_cp_geometry(x)
    x1 = np.einsum("ni,ni->n", g["nb"], p)
    x2 = np.einsum("ni,ni->n", g["u"], p) + g["d"]
    dist, scale = _soft_norm(np.stack([x1, x2], axis=-1))
    a1 = (scale * x1)[:, None]
    a2 = (scale * x2)[:, None]
    J_p = a1 * g["nb"] + a2 * g["u"]
    J_x = a1 * np.einsum("ni,nij->nj", p, g["J_nb"]) + a2 * (np.einsum("ni,nij->nj", p, g["J_u"]) + g["J_d"])
    return dist, J_p, J_x


def h_point_plane(p, cp):
    g = plane_cp_geometry(cp)
    val = np.einsum("ni,ni->n", g["n"], p) - g["d"]
    J_cp = np.einsum("ni,nij->nj", p, g["J_n"]) - g["J_d"]
    return val, g["n"], J_cp


def h_line_line_angle(xa, xb):
    ga = line_cp_geometry(xa)
    gb = line_cp_geometry(xb)
    val = np.einsum("ni,ni->n", ga["v"], gb["v"])
    return val, np.einsum("ni,nij->nj", gb["v"], ga["J_v"]), np.einsum("ni,nij->nj", ga["v"], gb["J_v"])


def h_line_line_dist(xa, xb):
    ga = line_cp_geometry(xa)
    gb = line_cp_geometry(xb)
    delta = gb["c"] - ga["c"]
    dist, g = _soft_norm(delta)
    u = g[:, None] * delta
    return dist, -np.einsum("ni,nij->nj", u, ga["J_c"]), np.einsum("ni,nij->nj", u, gb["J_c"])


def h_line_line_skew(xa, xb):
    """Distance between non-parallel lines, ``|w . (c_b - c_a)| / |w|``."""
    ga = line_cp_geometry(xa)
    gb = line_cp_geometry(xb)
    va, vb = ga["v"], gb["v"]
    w = np.cross(va, vb)
    wn = np.sqrt(np.einsum("ni,ni->n", w, w) + _EPS_NORM**2)
    delta = gb["c"] - ga["c"]
    s = np.einsum("ni,ni->n", w, delta)
    sign = np.where(s >= 0.0, 1.0, -1.0)
    val = sign * s / wn
    # d(val)/dw and d(val)/ddelta
    g_w = sign[:, None] * (delta / wn[:, None] - (s / wn**3)[:, None] * w)
    g_d = sign[:, None] * w / wn[:, None]
    # w = va x vb: dw = -[vb]x dva + [va]x dvb
    g_va = np.cross(vb, g_w)
    g_vb = np.cross(g_w, va)
    J_a = np.einsum("ni,nij->nj", g_va, ga["J_v"]) - np.einsum("ni,nij->nj", g_d, ga["J_c"])
    J_b = np.einsum("ni,nij->nj", g_vb, gb["J_v"]) + np.einsum("ni,nij->nj", g_d, gb["J_c"])
    return val, J_a, J_b


def h_line_plane_angle(x, cp):
    gl = line_cp_geometry(x)
    gp = plane_cp_geometry(cp)
    val = np.einsum("ni,ni->n", gl["v"], gp["n"])
    return val, np.einsum("ni,nij->nj", gp["n"], gl["J_v"]), np.einsum("ni,nij->nj", gl["v"], gp["J_n"])


def h_line_plane_dist(x, cp):
    gl = line_cp_geometry(x)
    gp = plane_cp_geometry(cp)
    val = np.einsum("ni,ni->n", gp["n"], gl["c"]) - gp["d"]
    J_x = np.einsum("ni,nij->nj", gp["n"], gl["J_c"])
    J_cp = np.einsum("ni,nij->nj", gl["c"], gp["J_n"]) - gp["J_d"]
    return val, J_x, J_cp


def h_plane_plane_angle(ca, cb):
    ga = plane_cp_geometry(ca)
    gb = plane_cp_geometry(cb)
    val = np.einsum("ni,ni->n", ga["n"], gb["n"])
    return val, np.einsum("ni,nij->nj", gb["n"], ga["J_n"]), np.einsum("ni,nij->nj", ga["n"], gb["J_n"])


def h_plane_plane_dist(ca, cb):
    delta = cb - ca
    dist, g = _soft_norm(delta)
    u = g[:, None] * delta
    return dist, -u, u


MODELS = {
    PriorKind.POINT_POINT_DIST: h_point_point,
    PriorKind.POINT_LINE_DIST: h_point_line,
    PriorKind.POINT_PLANE_DIST: h_point_plane,
    PriorKind.LINE_LINE_ANGLE: h_line_line_angle,
    PriorKind.LINE_LINE_DIST: h_line_line_dist,
    PriorKind.LINE_LINE_SKEW_DIST: h_line_line_skew,
    PriorKind.LINE_PLANE_ANGLE: h_line_plane_angle,
    PriorKind.LINE_PLANE_DIST: h_line_plane_dist,
    PriorKind.PLANE_PLANE_ANGLE: h_plane_plane_angle,
    PriorKind.PLANE_PLANE_DIST: h_plane_plane_dist,
}


def evaluate(kind, xa, xb):
    """Batched ``(h, J_a, J_b)`` for parameter arrays of shape ``(N, dim)``."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    return MODELS[kind](xa, xb)


# ---------------------------------------------------------------------------
# Single-pair API
# ---------------------------------------------------------------------------


@dataclass
class PairEvaluation:
    """Values and ``(J_a, J_b)`` per emitted kind."""

    values: dict = field(default_factory=dict)
    jacobians: dict = field(default_factory=dict)

    def add(self, kind, xa, xb):
        h, Ja, Jb = evaluate(kind, xa, xb)
        self.values[kind] = float(h[0])
        self.jacobians[kind] = (Ja[0], Jb[0])
        return self


def _params(f):
    if isinstance(f, Point3):
        return f.p
    if isinstance(f, LineCP):
        return f.x
    if isinstance(f, PlaneCP):
        return f.cp
    raise TypeError(f"unsupported feature type {type(f).__name__}")


def point_point(x_i, x_i2):
    if np.linalg.norm(x_i2.p - x_i.p) <= _MIN_SEPARATION:
        raise DegeneratePair("coincident points")
    return PairEvaluation().add(PriorKind.POINT_POINT_DIST, x_i.p, x_i2.p)


def point_line(x_i, line):
    return PairEvaluation().add(PriorKind.POINT_LINE_DIST, x_i.p, line.x)


def point_plane(x_i, plane):
    return PairEvaluation().add(PriorKind.POINT_PLANE_DIST, x_i.p, plane.cp)


def line_line(line_j, line_j2, tau_parallel=TAU_PARALLEL, skew=False):
    out = PairEvaluation().add(PriorKind.LINE_LINE_ANGLE, line_j.x, line_j2.x)
    if abs(out.values[PriorKind.LINE_LINE_ANGLE]) >= 1.0 - tau_parallel:
        out.add(PriorKind.LINE_LINE_DIST, line_j.x, line_j2.x)
    elif skew:
        out.add(PriorKind.LINE_LINE_SKEW_DIST, line_j.x, line_j2.x)
    return out


def line_plane(line, plane, tau_parallel=TAU_PARALLEL):
    out = PairEvaluation().add(PriorKind.LINE_PLANE_ANGLE, line.x, plane.cp)
    if abs(out.values[PriorKind.LINE_PLANE_ANGLE]) <= tau_parallel:
        out.add(PriorKind.LINE_PLANE_DIST, line.x, plane.cp)
    return out


def plane_plane(plane_k, plane_k2, tau_parallel=TAU_PARALLEL):
    out = PairEvaluation().add(PriorKind.PLANE_PLANE_ANGLE, plane_k.cp, plane_k2.cp)
    if abs(out.values[PriorKind.PLANE_PLANE_ANGLE]) >= 1.0 - tau_parallel:
        out.add(PriorKind.PLANE_PLANE_DIST, plane_k.cp, plane_k2.cp)
    return out


# ---------------------------------------------------------------------------
# Pairwise enumeration shared by extraction and association
# ---------------------------------------------------------------------------


def pairwise_values(feats, kinds, tau_parallel=TAU_PARALLEL):
    """All gated pairwise quantities.

    ``feats`` maps family -> (ids, params) with params stacked ``(N, dim)``.
    Returns kind -> (ids_a, ids_b, values) with ids in enumeration order.
    """
    kinds = set(kinds)
    out = {}

    def pairs(fa, fb):
        ids_a, xa = feats.get(fa, ((), np.zeros((0, 1))))
        ids_b, xb = feats.get(fb, ((), np.zeros((0, 1))))
        if fa == fb:
            idx = list(combinations(range(len(ids_a)), 2))
        else:
            idx = [(i, j) for i in range(len(ids_a)) for j in range(len(ids_b))]
        if not idx:
            return None
        ia = np.array([i for i, _ in idx])
        ib = np.array([j for _, j in idx])
        return [ids_a[i] for i in ia], [ids_b[j] for j in ib], xa[ia], xb[ib]

    def emit(kind, pa, pb, xa, xb, mask=None):
        if kind not in kinds:
            return
        if mask is not None:
            keep = np.flatnonzero(mask)
            pa, pb, xa, xb = [pa[i] for i in keep], [pb[i] for i in keep], xa[keep], xb[keep]
        if not len(pa):
            return
        out[kind] = (pa, pb, evaluate(kind, xa, xb)[0])

    for kind, fa, fb in (
        (PriorKind.POINT_POINT_DIST, "point", "point"),
        (PriorKind.POINT_LINE_DIST, "point", "line"),
        (PriorKind.POINT_PLANE_DIST, "point", "plane"),
    ):
        if kind in kinds:
            got = pairs(fa, fb)
            if got is not None:
                pa, pb, xa, xb = got
                if kind is PriorKind.POINT_POINT_DIST:
                    sep = np.linalg.norm(xb - xa, axis=1) > _MIN_SEPARATION
                    emit(kind, pa, pb, xa, xb, sep)
                else:
                    emit(kind, pa, pb, xa, xb)

    gated = (
        ("line", "line", PriorKind.LINE_LINE_ANGLE, PriorKind.LINE_LINE_DIST, True),
        ("line", "plane", PriorKind.LINE_PLANE_ANGLE, PriorKind.LINE_PLANE_DIST, False),
        ("plane", "plane", PriorKind.PLANE_PLANE_ANGLE, PriorKind.PLANE_PLANE_DIST, True),
    )
    for fa, fb, k_ang, k_dist, parallel_is_one in gated:
        if not {k_ang, k_dist, PriorKind.LINE_LINE_SKEW_DIST} & kinds:
            continue
        got = pairs(fa, fb)
        if got is None:
            continue
        pa, pb, xa, xb = got
        alpha = evaluate(k_ang, xa, xb)[0]
        emit(k_ang, pa, pb, xa, xb)
        if parallel_is_one:
            par = np.abs(alpha) >= 1.0 - tau_parallel
        else:
            par = np.abs(alpha) <= tau_parallel
        emit(k_dist, pa, pb, xa, xb, par)
        if k_ang is PriorKind.LINE_LINE_ANGLE:
            emit(PriorKind.LINE_LINE_SKEW_DIST, pa, pb, xa, xb, ~par)
    return out


def _stack_primitives(primitives):
    fam = {"point": ([], []), "line": ([], []), "plane": ([], [])}
    for i, prim in enumerate(primitives):
        if isinstance(prim, Point3):
            key = "point"
        elif isinstance(prim, PlueckerLine):
            prim, key = pluecker_to_cp(prim), "line"
        elif isinstance(prim, LineCP):
            key = "line"
        elif isinstance(prim, PlaneCP):
            key = "plane"
        else:
            raise TypeError(f"unsupported primitive {type(prim).__name__}")
        fam[key][0].append(i)
        fam[key][1].append(_params(prim))
    return {k: (ids, np.array(xs)) for k, (ids, xs) in fam.items() if ids}


# ---------------------------------------------------------------------------
# Database
# ---------------------------------------------------------------------------


class StructurePriorDB:
    """Immutable per-kind sorted lists of priors."""

    def __init__(self, priors=()):
        table = {}
        for prior in priors:
            table.setdefault(prior.kind, []).append(prior)
        self._table = {k: tuple(sorted(v, key=lambda p: p.value)) for k, v in table.items()}
        self._values = {k: np.array([p.value for p in v]) for k, v in self._table.items()}

    def __len__(self):
        return sum(len(v) for v in self._table.values())

    def __iter__(self):
        for kind in PriorKind:
            yield from self._table.get(kind, ())

    def __eq__(self, other):
        return isinstance(other, StructurePriorDB) and list(self) == list(other)

    def kinds(self):
        return [k for k in PriorKind if k in self._table]

    def entries(self, kind):
        return self._table.get(kind, ())

    def values(self, kind):
        return self._values.get(kind, np.zeros(0))

    def nearest(self, kind, value):
        """Index of the entry closest to ``value`` (lower index on ties), or None."""
        vals = self.values(kind)
        if not len(vals):
            return None
        i = bisect.bisect_left(vals.tolist(), value)
        if i == 0:
            return 0
        if i == len(vals):
            return len(vals) - 1
        return i if vals[i] - value < value - vals[i - 1] else i - 1

    def nearest_many(self, kind, values):
        vals = self.values(kind)
        values = np.asarray(values, dtype=float)
        i = np.clip(np.searchsorted(vals, values), 1, len(vals) - 1) if len(vals) > 1 else np.zeros(len(values), int)
        if len(vals) > 1:
            lower = values - vals[i - 1] <= vals[i] - values
            i = np.where(lower, i - 1, i)
        return i

    def check_sparse(self, tau):
        for kind, vals in self._values.items():
            t = tau(kind) if callable(tau) else tau
            if len(vals) > 1 and np.diff(vals).min() <= 2 * t:
                return False
        return True

    def dumps(self):
        """One JSON object per line: kind, value, sigma, support."""
        return "".join(
            json.dumps({"kind": p.kind.value, "value": p.value, "sigma": p.sigma, "support": p.support}) + "\n"
            for p in self
        )

    @classmethod
    def loads(cls, text):
        priors = []
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                priors.append(StructurePrior(PriorKind(rec["kind"]), float(rec["value"]), float(rec["sigma"]), int(rec["support"])))
        return cls(priors)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


@dataclass(frozen=True)
class ExtractionPolicy:
    tau_dist: float = 0.05
    tau_cos: float = 0.02
    tau_parallel: float = TAU_PARALLEL
    sigma_floor: float = SIGMA_FLOOR
    min_support: int = 1
    # widest accepted cluster span; None accepts any chain of values
    cluster_tol: float | None = None
    # raise on a too-wide cluster instead of dropping it
    strict: bool = True
    kinds: tuple = STANDARD_KINDS

    def tau(self, kind):
        return self.tau_cos if kind.is_angle else self.tau_dist


def cluster_values(values, gap):
    """1-D single-linkage clusters, returned as sorted arrays."""
    vals = np.sort(np.asarray(values, dtype=float))
    if not len(vals):
        return []
    cuts = np.flatnonzero(np.diff(vals) > gap) + 1
    return np.split(vals, cuts)


def extract_priors(primitives, policy=ExtractionPolicy(), diagnostics=None):
    """Cluster all pairwise quantities of a primitive list into a database."""
    feats = _stack_primitives(primitives)
    if not feats:
        return StructurePriorDB()
    values = pairwise_values(feats, policy.kinds, policy.tau_parallel)
    priors = []
    for kind in PriorKind:
        if kind not in values:
            continue
        clusters = cluster_values(values[kind][2], 2 * policy.tau(kind))
        offending = []
        for c in clusters:
            span = c[-1] - c[0]
            if policy.cluster_tol is not None and span > policy.cluster_tol:
                offending.append((float(c[0]), float(c[-1])))
                continue
            if len(c) < policy.min_support:
                continue
            value = float(np.mean(c))
            if kind.is_angle:
                value = float(np.clip(value, -1.0, 1.0))
            sigma = max(float(np.std(c)), policy.sigma_floor)
            priors.append(StructurePrior(kind, value, sigma, len(c)))
        if offending:
            if policy.strict:
                raise ExtractionRejected(kind, offending)
            if diagnostics is not None:
                diagnostics.append(f"{kind.value}: dropped {len(offending)} clusters wider than {policy.cluster_tol}")
    return StructurePriorDB(priors)


@dataclass(frozen=True)
class AssociationConfig:
    tau_dist: float = 0.05
    tau_cos: float = 0.02
    tau_parallel: float = TAU_PARALLEL
    min_observations: int = 3

    def tau(self, kind):
        return self.tau_cos if kind.is_angle else self.tau_dist


def associate(window, confidences, db, config=AssociationConfig()):
    """Attach database priors to confident feature pairs of a window.

    ``window`` is a SlidingWindowState, ``confidences`` maps feature keys to
    observation counts. Output order depends only on the feature ids.
    """
    if not len(db):
        return []
    feats = {}
    for fam, table in (("point", window.points), ("line", window.lines), ("plane", window.planes)):
        ids = sorted(i for i in table if confidences.get((fam, i), 0) >= config.min_observations)
        if ids:
            feats[fam] = (ids, np.array([_params(table[i]) for i in ids]))
    if not feats:
        return []
    values = pairwise_values(feats, db.kinds(), config.tau_parallel)
    out = []
    for kind in PriorKind:
        if kind not in values:
            continue
        ids_a, ids_b, h = values[kind]
        near = db.nearest_many(kind, h)
        entries = db.entries(kind)
        vals = db.values(kind)
        hit = np.abs(h - vals[near]) <= config.tau(kind)
        fa, fb = kind.families
        for i in np.flatnonzero(hit):
            out.append(AssociatedPriorFactor(kind, (fa, ids_a[i]), (fb, ids_b[i]), entries[near[i]]))
    return out
