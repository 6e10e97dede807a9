"""Information-gain scoring and budgeted selection of structure priors.

The score of a set of priors is the log-determinant of the pose-marginal
information of the window after adding them. Marginalizing the non-pose
block ``f`` of ``H`` and applying the determinant lemma gives, for a
candidate touching columns ``F`` with whitened Jacobian ``J``::

    gain = logdet(I + J A J^T) - logdet(I + J B J^T)
    A = [(H + eps I_f)^-1]_FF,  B = [(H_ff + eps I)^-1]_FF

so each evaluation is a determinant of the candidate's residual size.
After a pick both ``A`` and ``B`` are refreshed with a Woodbury update.

The marginal gain is not submodular in general: two priors acting on the
same feature along different directions reinforce each other once the
feature is marginalized. Plain greedy is therefore the default; the lazy
variant is exact only when gains happen to be diminishing.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .priors import evaluate

DAMPING = 1e-9
MIN_GAIN = 1e-12


@dataclass
class CandidateInfo:
    """Whitened Jacobian ``J`` (m x len(cols)) over window columns ``cols``."""

    id: int
    cols: np.ndarray
    J: np.ndarray
    dim: int

    @property
    def I(self):
        out = np.zeros((self.dim, self.dim))
        out[np.ix_(self.cols, self.cols)] = self.J.T @ self.J
        return out


@dataclass
class SelectionResult:
    chosen: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def total_gain(self):
        return float(sum(self.gains))

    @property
    def increasing_steps(self):
        """Greedy steps whose gain exceeded the previous one."""
        return int(np.sum(np.diff(self.gains) > 1e-12)) if len(self.gains) > 1 else 0


def _param(value):
    for attr in ("p", "x", "cp"):
        if hasattr(value, attr):
            return getattr(value, attr)
    raise TypeError(type(value).__name__)


def candidate_fims(factors, linearization, diagnostics=None):
    """One CandidateInfo per associated prior, ids are list positions."""
    offsets, dim = linearization.layout()
    by_kind = {}
    for i, f in enumerate(factors):
        by_kind.setdefault(f.kind, []).append(i)
    found = {}
    for kind, idx in by_kind.items():
        fs = [factors[i] for i in idx]
        xa = np.array([_param(linearization[f.a]) for f in fs])
        xb = np.array([_param(linearization[f.b]) for f in fs])
        _, Ja, Jb = evaluate(kind, xa, xb)
        sig = np.array([f.prior.sigma for f in fs])
        J = np.concatenate([Ja, Jb], axis=1) / sig[:, None]
        for i, f, row in zip(idx, fs, J):
            if not np.all(np.isfinite(row)):
                if diagnostics is not None:
                    diagnostics.append(f"candidate {i} ({f.kind.value}) dropped: non-finite Jacobian")
                continue
            oa, da = offsets[f.a]
            ob, db = offsets[f.b]
            cols = np.concatenate([np.arange(oa, oa + da), np.arange(ob, ob + db)])
            found[i] = CandidateInfo(i, cols, row[None], dim)
    return [found[i] for i in sorted(found)]


def candidate_fim(factor, linearization):
    got = candidate_fims([factor], linearization)
    if not got:
        raise ValueError("degenerate prior geometry")
    return got[0]


def pose_indices(state):
    """Tangent indices of ``(dtheta, dp)`` for every IMU state in the window."""
    offsets, _ = state.layout()
    idx = [np.arange(off, off + 6) for key, (off, _) in offsets.items() if key[0] == "imu"]
    return np.concatenate(idx) if idx else np.zeros(0, dtype=int)


def _complement(pose_idx, n):
    mask = np.ones(n, dtype=bool)
    mask[pose_idx] = False
    return np.flatnonzero(mask)


def pose_marginal_information(H, pose_idx, eps=DAMPING):
    H = np.asarray(H, dtype=float)
    pose_idx = np.asarray(pose_idx, dtype=int)
    f = _complement(pose_idx, len(H))
    Hpp = H[np.ix_(pose_idx, pose_idx)]
    if not len(f):
        return Hpp.copy()
    Hpf = H[np.ix_(pose_idx, f)]
    Hff = H[np.ix_(f, f)] + eps * np.eye(len(f))
    M = Hpp - Hpf @ np.linalg.solve(Hff, Hpf.T)
    return 0.5 * (M + M.T)


def _logdet(M):
    sign, val = np.linalg.slogdet(M)
    if sign <= 0:
        raise np.linalg.LinAlgError("pose-marginal information is not positive definite")
    return val


def logdet_gain(base, I_s, pose_idx):
    """Direct reference: ``logdet(marg(base + I_s)) - logdet(marg(base))``."""
    I_s = I_s.I if isinstance(I_s, CandidateInfo) else I_s
    return _logdet(pose_marginal_information(base + I_s, pose_idx)) - _logdet(
        pose_marginal_information(base, pose_idx)
    )


class _GainModel:
    """Maintains ``A`` and ``B`` over the union of candidate columns.

    Candidates may touch pose columns as well; those only enter ``A``.
    """

    def __init__(self, candidates, base, pose_idx, eps=DAMPING):
        base = np.asarray(base, dtype=float)
        n = len(base)
        f = _complement(np.asarray(pose_idx, dtype=int), n)
        cols = np.unique(np.concatenate([c.cols for c in candidates]))
        local = {c: i for i, c in enumerate(cols)}
        Hd = base.copy()
        Hd[f, f] += eps
        Hff = base[np.ix_(f, f)] + eps * np.eye(len(f))
        self.A = _inv_block(Hd, cols)
        # pose columns of a candidate do not enter the feature block: zero rows there
        in_f = np.flatnonzero(np.isin(cols, f))
        self.B = np.zeros((len(cols), len(cols)))
        if len(in_f):
            self.B[np.ix_(in_f, in_f)] = _inv_block(Hff, np.searchsorted(f, cols[in_f]))
        width = max(len(c.cols) for c in candidates)
        m = max(len(c.J) for c in candidates)
        N = len(candidates)
        self.idx = np.zeros((N, width), dtype=int)
        self.J = np.zeros((N, m, width))
        for i, c in enumerate(candidates):
            self.idx[i, : len(c.cols)] = [local[k] for k in c.cols]
            self.J[i, : len(c.J), : len(c.cols)] = c.J
        self.eye = np.eye(m)

    def gains(self, which):
        idx = self.idx[which]
        J = self.J[which]
        Asub = self.A[idx[:, :, None], idx[:, None, :]]
        Bsub = self.B[idx[:, :, None], idx[:, None, :]]
        if J.shape[1] == 1:
            # scalar priors: the determinants are 1 + j P j^T
            j = J[:, 0]
            qa = np.einsum("ni,nij,nj->n", j, Asub, j)
            qb = np.einsum("ni,nij,nj->n", j, Bsub, j)
            return np.log1p(qa) - np.log1p(qb)
        Jt = np.swapaxes(J, 1, 2)
        ga = np.linalg.slogdet(self.eye + J @ Asub @ Jt)[1]
        gb = np.linalg.slogdet(self.eye + J @ Bsub @ Jt)[1]
        return ga - gb

    def commit(self, i):
        idx = self.idx[i]
        J = self.J[i]
        for name in ("A", "B"):
            P = getattr(self, name)
            PJt = P[:, idx] @ J.T
            S = self.eye + J @ PJt[idx]
            P = P - PJt @ np.linalg.solve(S, PJt.T)
            setattr(self, name, 0.5 * (P + P.T))


def _inv_block(M, idx):
    """``inv(M)[idx][:, idx]`` through a Cholesky factorization."""
    from scipy.linalg import cho_factor, cho_solve

    E = np.zeros((len(M), len(idx)))
    E[idx, np.arange(len(idx))] = 1.0
    X = cho_solve(cho_factor(M), E)[idx]
    return 0.5 * (X + X.T)


def greedy_select(candidates, base, k, pose_idx, lazy=False):
    """Pick up to ``k`` candidates by marginal log-det gain.

    Ties go to the lowest candidate id. Plain greedy performs exactly
    ``sum(n - t)`` gain evaluations over the steps ``t`` it runs.
    """
    result = SelectionResult()
    candidates = sorted(candidates, key=lambda c: c.id)
    if k <= 0 or not candidates:
        return result
    model = _GainModel(candidates, base, pose_idx)
    if lazy:
        return _lazy(model, candidates, k, result)
    remaining = np.arange(len(candidates))
    while remaining.size and len(result.chosen) < k:
        g = model.gains(remaining)
        result.evaluations += len(remaining)
        best = int(np.argmax(g))
        if g[best] < MIN_GAIN:
            break
        pick = remaining[best]
        result.chosen.append(candidates[pick].id)
        result.gains.append(float(g[best]))
        model.commit(pick)
        remaining = np.delete(remaining, best)
    return result


def _lazy(model, candidates, k, result):
    g0 = model.gains(np.arange(len(candidates)))
    result.evaluations += len(candidates)
    heap = [(-g, i, 0) for i, g in enumerate(g0)]
    heapq.heapify(heap)
    step = 0
    while heap and len(result.chosen) < k:
        neg, i, stamp = heapq.heappop(heap)
        if stamp != step:
            g = float(model.gains(np.array([i]))[0])
            result.evaluations += 1
            heapq.heappush(heap, (-g, i, step))
            continue
        if -neg < MIN_GAIN:
            break
        result.chosen.append(candidates[i].id)
        result.gains.append(-neg)
        model.commit(i)
        step += 1
    return result


def exhaustive_select(candidates, base, k, pose_idx, max_candidates=15, max_k=4):
    """Best size-``k`` subset by direct evaluation; a small-n baseline only."""
    candidates = sorted(candidates, key=lambda c: c.id)
    if len(candidates) > max_candidates or k > max_k:
        raise ValueError(f"exhaustive search limited to n <= {max_candidates}, k <= {max_k}")
    result = SelectionResult()
    k = min(k, len(candidates))
    if k <= 0:
        return result
    base = np.asarray(base, dtype=float)
    ref = _logdet(pose_marginal_information(base, pose_idx))
    infos = [c.I for c in candidates]
    best, best_set = -np.inf, ()
    for subset in combinations(range(len(candidates)), k):
        H = base + sum(infos[i] for i in subset)
        val = _logdet(pose_marginal_information(H, pose_idx)) - ref
        result.evaluations += 1
        if val > best + 1e-12:
            best, best_set = val, subset
    result.chosen = [candidates[i].id for i in best_set]
    result.gains = [float(best)]
    return result


def random_select(candidates, k, rng):
    ids = sorted(c.id for c in candidates)
    if k >= len(ids):
        return SelectionResult(chosen=ids)
    pick = rng.choice(len(ids), size=k, replace=False)
    return SelectionResult(chosen=sorted(ids[i] for i in pick))
