"""Robust Levenberg-Marquardt over a sliding-window factor graph.

All factors are whitened before assembly: a factor with residual ``r``,
Jacobian ``J`` and square-root information ``W`` contributes rows
``W r`` and ``W J`` to a stacked sparse system. Feature and structure
factors are reweighted with Huber IRLS weights on their Mahalanobis norm;
IMU and linear (prior / marginal) factors are never robustified.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .factors import line_model, plane_model, point_model
from .geometry import EPS_LINE, EPS_PLANE, quat_conj, quat_log, quat_mul, right_jacobian_inv
from .imu import GRAVITY, imu_model, stack_preintegrations, stack_states
from .priors import evaluate

FEATURE_DIMS = {"point": 3, "line": 6, "plane": 3}
PARAM_ATTR = {"point": "p", "line": "x", "plane": "cp"}


class RetryWithLargerLambda(np.linalg.LinAlgError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 10
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 2.0
    lambda_max: float = 1e8
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    huber_delta: float = 1.345
    window: int = 10

    def __post_init__(self):
        for name in ("max_iterations", "lambda0", "lambda_up", "lambda_down", "huber_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.window < 2:
            raise ValueError("window length must be at least 2")


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------


@dataclass
class ImuEdge:
    key_i: tuple
    key_j: tuple
    pre: object
    sqrt_info: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())


@dataclass
class FeatureObservation:
    family: str
    frame: tuple
    feature: tuple
    z: np.ndarray
    sqrt_info: np.ndarray


@dataclass
class StructureFactor:
    kind: object
    a: tuple
    b: tuple
    z: float
    sigma: float


@dataclass
class LinearFactor:
    """``e = r0 + A (x [-] anchor)`` over ``keys``, already whitened."""

    keys: list
    anchor: dict
    A: np.ndarray
    r0: np.ndarray


@dataclass
class _FeatureBatch:
    frames: list
    frame_idx: np.ndarray
    feats: list
    feat_idx: np.ndarray
    z: np.ndarray
    W: np.ndarray
    # per-row scale when every W is a multiple of the identity
    isotropic: np.ndarray | None

    @classmethod
    def build(cls, obs):
        frames = list(dict.fromkeys(f.frame for f in obs))
        feats = list(dict.fromkeys(f.feature for f in obs))
        fpos = {k: i for i, k in enumerate(frames)}
        gpos = {k: i for i, k in enumerate(feats)}
        W = np.array([f.sqrt_info for f in obs])
        diag = np.einsum("nii->ni", W)
        iso = None
        if np.array_equal(W, diag[:, :, None] * np.eye(W.shape[1])) and np.all(diag == diag[:, :1]):
            iso = diag[:, 0].copy()
        return cls(
            frames,
            np.array([fpos[f.frame] for f in obs]),
            feats,
            np.array([gpos[f.feature] for f in obs]),
            np.array([f.z for f in obs]),
            W,
            iso,
        )


@dataclass
class FactorGraph:
    imu: list = field(default_factory=list)
    features: list = field(default_factory=list)
    structure: list = field(default_factory=list)
    linear: list = field(default_factory=list)

    def copy(self):
        return FactorGraph(list(self.imu), list(self.features), list(self.structure), list(self.linear))

    def imu_batch(self):
        """Stacked preintegrations and weights of the IMU edges (cached)."""
        key = tuple(map(id, self.imu))
        cached = getattr(self, "_imu_batch", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        edges = self.imu
        out = (
            stack_preintegrations([e.pre for e in edges]),
            np.array([e.sqrt_info for e in edges]),
        )
        self._imu_batch = (key, out)
        return out

    def structure_batch(self):
        """Loss groups and per-kind stacked structure factors (cached)."""
        key = tuple(map(id, self.structure))
        cached = getattr(self, "_structure_batch", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        by_kind = {}
        for i, f in enumerate(self.structure):
            by_kind.setdefault(f.kind, []).append(i)
        out = {}
        for kind, idx in by_kind.items():
            fs = [self.structure[i] for i in idx]
            out[kind] = (
                np.array(idx),
                [f.a for f in fs],
                [f.b for f in fs],
                np.array([f.z for f in fs]),
                np.array([f.sigma for f in fs]),
            )
        batch = (structure_groups(self.structure), out)
        self._structure_batch = (key, batch)
        return batch

    def feature_batches(self):
        """Observations grouped per family as stacked arrays (cached)."""
        key = tuple(map(id, self.features))
        cached = getattr(self, "_batches", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        out = {}
        for fam in FEATURE_DIMS:
            obs = [f for f in self.features if f.family == fam]
            if obs:
                out[fam] = _FeatureBatch.build(obs)
        self._batches = (key, out)
        return out

    def counts(self):
        out = {"imu": len(self.imu), "linear": len(self.linear), "structure": len(self.structure)}
        for fam in FEATURE_DIMS:
            out[fam] = sum(1 for f in self.features if f.family == fam)
        return out

    def keys(self):
        ks = set()
        for e in self.imu:
            ks.update((e.key_i, e.key_j))
        for f in self.features:
            ks.update((f.frame, f.feature))
        for s in self.structure:
            ks.update((s.a, s.b))
        for lf in self.linear:
            ks.update(lf.keys)
        return ks


@dataclass
class NormalEquations:
    H: np.ndarray
    b: np.ndarray
    cost: float
    skipped: int = 0


# ---------------------------------------------------------------------------
# Robust loss
# ---------------------------------------------------------------------------


def huber_weight(r2, delta):
    r2 = np.asarray(r2, dtype=float)
    w = np.where(r2 <= delta * delta, 1.0, delta / np.sqrt(np.maximum(r2, delta * delta)))
    return w if w.ndim else float(w)


def huber_cost(r2, delta):
    r2 = np.asarray(r2, dtype=float)
    out = np.where(r2 <= delta * delta, r2, 2.0 * delta * np.sqrt(r2) - delta * delta)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


class _Stack:
    """Accumulates whitened blocks straight into dense ``H`` and ``b``."""

    # zero-padded Jacobian columns may run past the last variable
    PAD = 4

    def __init__(self, dim):
        self.dim = dim
        self.padded = dim + self.PAD
        self.h_idx, self.h_val, self.b_idx, self.b_val = [], [], [], []
        self.H_dense = None
        self.b_dense = None
        self.cost = 0.0

    def add_dense(self, e, J):
        """Unrobust rows with a full-width Jacobian ``J`` (m, dim)."""
        self.cost += float(e @ e)
        if self.H_dense is None:
            self.H_dense, self.b_dense = J.T @ J, J.T @ e
        else:
            self.H_dense += J.T @ J
            self.b_dense += J.T @ e

    def add(self, e, blocks, robust, delta):
        """``e`` (N, m); blocks: list of (col offsets (N,), J (N, m, d))."""
        if len(e) == 0:
            return
        r2 = np.einsum("nm,nm->n", e, e)
        if robust:
            self.cost += float(np.sum(huber_cost(r2, delta)))
            s = np.sqrt(huber_weight(r2, delta))
            e = e * s[:, None]
            blocks = [(offs, J * s[:, None, None]) for offs, J in blocks]
        else:
            self.cost += float(np.sum(r2))
        self.add_scaled(e, blocks)

    def add_scaled(self, e, blocks):
        """Append rows whose loss weighting is already applied."""
        if len(e) == 0:
            return
        cols = np.concatenate([offs[:, None] + np.arange(J.shape[2])[None, :] for offs, J in blocks], axis=1)
        J = np.concatenate([J for _, J in blocks], axis=2)
        self.b_idx.append(cols.ravel())
        self.b_val.append(np.einsum("nmi,nm->ni", J, e).ravel())
        self.h_idx.append((cols[:, :, None] * self.padded + cols[:, None, :]).ravel())
        self.h_val.append(np.einsum("nmi,nmj->nij", J, J).ravel())

    def normal_equations(self, skipped):
        dim = self.dim
        H = np.zeros((dim, dim)) if self.H_dense is None else self.H_dense
        b = np.zeros(dim) if self.b_dense is None else self.b_dense
        if self.h_idx:
            n = self.padded
            H = H + np.bincount(
                np.concatenate(self.h_idx), np.concatenate(self.h_val), minlength=n * n
            ).reshape(n, n)[:dim, :dim]
            b = b + np.bincount(np.concatenate(self.b_idx), np.concatenate(self.b_val), minlength=n)[:dim]
        H = 0.5 * (H + H.T)
        return NormalEquations(H, b, self.cost, skipped)


def _tangent_delta(value, anchor):
    """Tangent difference and Jacobian diagonal blocks (rotation part)."""
    delta = value.boxminus(anchor)
    if hasattr(value, "pose"):
        J = np.eye(len(delta))
        J[:3, :3] = right_jacobian_inv(quat_log(quat_mul(quat_conj(anchor.pose.q), value.pose.q)))
        return delta, J
    return delta, None


def build_normal_equations(graph, x, delta_huber=1.345):
    offsets, dim = x.layout()
    st = _Stack(dim)
    skipped = 0

    if graph.imu:
        edges = graph.imu
        pre, W = graph.imu_batch()
        r, Ji, Jj = imu_model(
            stack_states([x[e.key_i] for e in edges]),
            stack_states([x[e.key_j] for e in edges]),
            pre,
            edges[0].gravity,
        )
        st.add(
            np.einsum("nij,nj->ni", W, r),
            [
                (np.array([offsets[e.key_i][0] for e in edges]), W @ Ji),
                (np.array([offsets[e.key_j][0] for e in edges]), W @ Jj),
            ],
            robust=False,
            delta=delta_huber,
        )

    for lf in graph.linear:
        parts, col = [], 0
        J = np.zeros((len(lf.r0), dim))
        for key in lf.keys:
            d, Jd = _tangent_delta(x[key], lf.anchor[key])
            A_k = lf.A[:, col : col + len(d)]
            if Jd is not None:
                A_k = A_k @ Jd
            off = offsets[key][0]
            J[:, off : off + len(d)] = A_k
            parts.append(d)
            col += len(d)
        st.add_dense(lf.r0 + lf.A @ np.concatenate(parts), J)

    for fam, batch in graph.feature_batches().items():
        q = np.array([x[k].pose.q for k in batch.frames])[batch.frame_idx]
        p = np.array([x[k].pose.p for k in batch.frames])[batch.frame_idx]
        attr = PARAM_ATTR[fam]
        prm = np.array([getattr(x[k], attr) for k in batch.feats])[batch.feat_idx]
        if fam == "point":
            r, J_pose, J_feat = point_model(q, p, prm, batch.z)
            ok = None
        elif fam == "line":
            r, J_pose, J_feat, nrm = line_model(q, p, prm, batch.z)
            ok = nrm >= EPS_LINE
        else:
            r, J_pose, J_feat, nrm = plane_model(q, p, prm, batch.z)
            ok = nrm >= EPS_PLANE
        frame_off = np.array([offsets[k][0] for k in batch.frames])[batch.frame_idx]
        feat_off = np.array([offsets[k][0] for k in batch.feats])[batch.feat_idx]
        W = batch.W
        if ok is not None and not ok.all():
            skipped += int(np.sum(~ok))
            r, J_pose, J_feat, W = r[ok], J_pose[ok], J_feat[ok], W[ok]
            frame_off, feat_off = frame_off[ok], feat_off[ok]
        if batch.isotropic is not None:
            s = batch.isotropic if ok is None else batch.isotropic[ok]
            e = r * s[:, None]
            JP = J_pose * s[:, None, None]
            JF = J_feat * s[:, None, None]
        else:
            e = np.einsum("nij,nj->ni", W, r)
            JP = W @ J_pose
            JF = W @ J_feat
        st.add(e, [(frame_off, JP), (feat_off, JF)], robust=True, delta=delta_huber)

    if graph.structure:
        _add_structure(st, graph, x, offsets, delta_huber)

    return st.normal_equations(skipped)


def structure_groups(factors):
    """Group id per factor: factors on the same feature pair share one loss."""
    ids = {}
    return np.array([ids.setdefault((f.a, f.b), len(ids)) for f in factors], dtype=int)


def _add_structure(st, graph, x, offsets, delta_huber):
    groups, by_kind = graph.structure_batch()
    evals = []
    e_all = np.zeros(len(groups))
    for kind, (idx, keys_a, keys_b, z, sig) in by_kind.items():
        fa, fb = kind.families
        xa = np.array([getattr(x[k], PARAM_ATTR[fa]) for k in keys_a])
        xb = np.array([getattr(x[k], PARAM_ATTR[fb]) for k in keys_b])
        h, Ja, Jb = evaluate(kind, xa, xb)
        e_all[idx] = (h - z) / sig
        oa = np.array([offsets[k][0] for k in keys_a])
        ob = np.array([offsets[k][0] for k in keys_b])
        evals.append((idx, oa, Ja / sig[:, None], ob, Jb / sig[:, None]))
    g2 = np.bincount(groups, weights=e_all**2)
    st.cost += float(np.sum(huber_cost(g2, delta_huber)))
    scale = np.sqrt(huber_weight(g2, delta_huber))[groups]
    order = np.concatenate([ev[0] for ev in evals])
    s = scale[order]
    oa = np.concatenate([ev[1] for ev in evals])
    ob = np.concatenate([ev[3] for ev in evals])
    Ja = np.concatenate([_pad4(ev[2]) for ev in evals]) * s[:, None]
    Jb = np.concatenate([_pad4(ev[4]) for ev in evals]) * s[:, None]
    st.add_scaled((e_all[order] * s)[:, None], [(oa, Ja[:, None, :]), (ob, Jb[:, None, :])])


def _pad4(J):
    return J if J.shape[1] == 4 else np.pad(J, ((0, 0), (0, 4 - J.shape[1])))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


def lm_step(ne, lam):
    """Solve ``(H + lam I) dx = -b`` by Cholesky."""
    if lam < 0:
        raise ValueError("damping must be non-negative")
    A = ne.H + lam * np.eye(len(ne.b))
    try:
        factor = cho_factor(A, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RetryWithLargerLambda(str(exc)) from exc
    dx = cho_solve(factor, -ne.b)
    if not np.all(np.isfinite(dx)):
        raise RetryWithLargerLambda("non-finite step")
    return dx


@dataclass
class SolveReport:
    costs: list = field(default_factory=list)
    iterations: int = 0
    iteration_times: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    skipped: int = 0


def optimize(graph, x0, config=SolverConfig()):
    """Damped Gauss-Newton with standard lambda adaptation.

    ``report.iterations`` counts linear solves; every accepted iterate
    lowers the cost.
    """
    report = SolveReport()
    x = x0
    ne = build_normal_equations(graph, x, config.huber_delta)
    report.costs.append(ne.cost)
    report.skipped = ne.skipped
    lam = config.lambda0
    while report.iterations < config.max_iterations:
        t0 = time.perf_counter()
        report.iterations += 1
        try:
            dx = lm_step(ne, lam)
        except RetryWithLargerLambda:
            lam *= config.lambda_up
            report.iteration_times.append(time.perf_counter() - t0)
            if lam > config.lambda_max:
                report.diverged = True
                break
            continue
        if np.linalg.norm(dx) <= config.step_tol:
            report.iteration_times.append(time.perf_counter() - t0)
            report.converged = True
            break
        x_new = x.boxplus(dx)
        ne_new = build_normal_equations(graph, x_new, config.huber_delta)
        report.iteration_times.append(time.perf_counter() - t0)
        if ne_new.cost < ne.cost:
            decrease = ne.cost - ne_new.cost
            x, ne = x_new, ne_new
            report.costs.append(ne.cost)
            lam = max(lam / config.lambda_down, 1e-12)
            if decrease <= config.cost_tol * (1.0 + ne.cost):
                report.converged = True
                break
        else:
            lam *= config.lambda_up
            if lam > config.lambda_max:
                report.diverged = True
                break
    return x, report


# ---------------------------------------------------------------------------
# Marginalization
# ---------------------------------------------------------------------------


def linear_factor_from_information(H, b, keys, anchor, rel_tol=1e-12):
    """Whitened linear factor with ``A^T A = H`` and ``A^T r0 = b``."""
    H = 0.5 * (H + H.T)
    s, U = np.linalg.eigh(H)
    keep = s > rel_tol * max(s.max(), 1e-300) if len(s) else np.zeros(0, dtype=bool)
    s, U = s[keep], U[:, keep]
    sq = np.sqrt(s)
    A = sq[:, None] * U.T
    r0 = (U.T @ b) / sq
    return LinearFactor(list(keys), dict(anchor), A, r0)


def marginalize(graph, x, remove, config=SolverConfig(), eps=1e-9):
    """Eliminate the variables in ``remove`` by Schur complement at ``x``.

    Returns the reduced graph and state. Factors touching removed variables
    are replaced by one linear factor on their remaining neighbours.
    """
    remove = set(remove)
    touching = FactorGraph()
    rest = FactorGraph()
    for e in graph.imu:
        (touching if {e.key_i, e.key_j} & remove else rest).imu.append(e)
    for f in graph.features:
        (touching if {f.frame, f.feature} & remove else rest).features.append(f)
    for s in graph.structure:
        (touching if {s.a, s.b} & remove else rest).structure.append(s)
    for lf in graph.linear:
        (touching if set(lf.keys) & remove else rest).linear.append(lf)

    involved = touching.keys() | remove
    local = x.subset(involved)
    keep_keys = [k for k in local.keys() if k not in remove]
    reduced = x.subset([k for k in x.keys() if k not in remove])
    if not keep_keys:
        return rest, reduced

    ne = build_normal_equations(touching, local, config.huber_delta)
    offsets, _ = local.layout()
    m_idx = np.concatenate([np.arange(offsets[k][0], offsets[k][0] + offsets[k][1]) for k in local.keys() if k in remove])
    k_idx = np.concatenate([np.arange(offsets[k][0], offsets[k][0] + offsets[k][1]) for k in keep_keys])
    Hmm = ne.H[np.ix_(m_idx, m_idx)] + eps * np.eye(len(m_idx))
    Hkm = ne.H[np.ix_(k_idx, m_idx)]
    c = cho_factor(Hmm)
    H_marg = ne.H[np.ix_(k_idx, k_idx)] - Hkm @ cho_solve(c, Hkm.T)
    b_marg = ne.b[k_idx] - Hkm @ cho_solve(c, ne.b[m_idx])
    if np.abs(H_marg).max(initial=0.0) > 0.0:
        anchor = {k: x[k] for k in keep_keys}
        rest.linear.append(linear_factor_from_information(H_marg, b_marg, keep_keys, anchor))
    return rest, reduced


def marginalize_oldest(graph, x, config=SolverConfig()):
    """Slide the window once it holds more than ``config.window`` IMU states.

    Removes the oldest IMU state plus every feature whose observations all
    come from that state.
    """
    imu_keys = [k for k in x.keys() if k[0] == "imu"]
    if len(imu_keys) <= config.window:
        return graph, x
    oldest = imu_keys[0]
    seen = {}
    for f in graph.features:
        seen.setdefault(f.feature, set()).add(f.frame)
    remove = {oldest} | {k for k, frames in seen.items() if frames == {oldest}}
    # features without any observation left in the graph go as well
    feature_keys = {k for k in x.keys() if k[0] != "imu"}
    remove |= {k for k in feature_keys if k not in seen}
    return marginalize(graph, x, remove, config)
