"""Knowledge-graph estimation by node-wise functional feature selection.

Each feature in turn is the (multi-column) response of a group-lasso
regression on all other features' embedding blocks. Walking the penalty
down from ``lambda_max`` records the relative penalty ``c`` at which every
predictor first enters the active set; those values fill the target's row
of the adjacency matrix, which is then symmetrized, pruned and normalized.

The group lasso problem is

    minimize  0.5 * ||Y - sum_t X_t B_t||_F^2 + lam * sum_t w_t ||B_t||_F

solved by exact block coordinate descent with an active working set. All
work happens on the Gram matrix ``X'X`` so the cost per sweep does not
depend on the number of entities.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .embedding import EmbeddedTensor, standardize
from .errors import ConfigError, ContractError, ConvergenceError, DegenerateError

THETA_SYNTHETIC = 0.7
_NEWTON_EVERY = 25
THETA_SURVEY = 0.5


@dataclass(frozen=True)
class SolverConfig:
    p_max: int = 5
    path_length: int = 50
    c_min: float = 0.01
    tolerance: float = 1e-8
    max_iters: int = 10_000
    refine_depth: int = 30

    def __post_init__(self):
        if self.p_max < 0:
            raise ConfigError("p_max must be non-negative")
        if self.path_length < 2:
            raise ConfigError("path_length must be at least 2")
        if not 0 < self.c_min < 1:
            raise ConfigError("c_min must lie in (0, 1)")
        if self.tolerance <= 0 or self.max_iters < 1:
            raise ConfigError("tolerance must be positive and max_iters >= 1")

    def c_grid(self) -> np.ndarray:
        return np.geomspace(1.0, self.c_min, self.path_length)


@dataclass(frozen=True)
class SelectionPath:
    """Predictors of one target in order of entry, with the ``c`` at entry."""

    target: int
    selections: tuple = ()

    def __post_init__(self):
        sel = tuple((int(t), float(c)) for t, c in self.selections)
        object.__setattr__(self, "selections", sel)
        idx = [t for t, _ in sel]
        cs = [c for _, c in sel]
        if len(set(idx)) != len(idx):
            raise ContractError("duplicate feature in selection path")
        if self.target in idx:
            raise ContractError("target selected as its own predictor")
        if any(not 0 < c <= 1 for c in cs):
            raise ContractError("selection values must lie in (0, 1]")
        if any(b > a for a, b in zip(cs, cs[1:])):
            raise ContractError("selection values must not increase along the path")

    @property
    def features(self) -> list:
        return [t for t, _ in self.selections]


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Adjacency in raw, symmetrized-and-pruned, and normalized form."""

    a_raw: np.ndarray
    a_sym: np.ndarray
    a_norm: np.ndarray
    theta: float
    paths: tuple = ()
    feature_names: tuple = field(default=())

    @property
    def p(self) -> int:
        return self.a_raw.shape[0]

    def edges(self):
        """Off-diagonal ``(i, j, weight)`` with ``i < j`` surviving pruning."""
        i, j = np.nonzero(np.triu(self.a_sym, k=1))
        return [(int(a), int(b), float(self.a_sym[a, b])) for a, b in zip(i, j)]


# ---------------------------------------------------------------------------
# Group lasso
# ---------------------------------------------------------------------------


class GroupLassoProblem:
    """Gram-form group lasso with one response block.

    Parameters
    ----------
    gram : ndarray, shape (q, q)
        ``X'X`` for the stacked predictor columns.
    xty : ndarray, shape (q, r)
        ``X'Y``.
    groups : list of slice
        Column ranges of each group inside the stack.
    weights : ndarray, optional
        Penalty weight per group (default 1).
    yty : float, optional
        ``||Y||_F^2``, only needed for objective values.
    """

    def __init__(self, gram, xty, groups, weights=None, yty=None):
        self.gram = np.asarray(gram, dtype=float)
        self.xty = np.asarray(xty, dtype=float)
        if self.xty.ndim == 1:
            self.xty = self.xty[:, None]
        self.groups = list(groups)
        self.weights = np.ones(len(self.groups)) if weights is None else np.asarray(weights, dtype=float)
        self.yty = yty
        self._eig = [None] * len(self.groups)
        self._starts = np.array([g.start for g in self.groups], dtype=int)
        if any(a.stop != b.start for a, b in zip(self.groups, self.groups[1:])) or self.groups[0].start != 0:
            raise ContractError("groups must be contiguous column ranges")
        self.lambda_max = max(
            (np.linalg.norm(self.xty[g]) / w for g, w in zip(self.groups, self.weights)), default=0.0
        )

    @classmethod
    def from_blocks(cls, target_block, predictor_blocks, weights=None):
        y = np.asarray(target_block, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        blocks = [np.asarray(b, dtype=float).reshape(y.shape[0], -1) for b in predictor_blocks]
        if not blocks:
            raise ContractError("no predictor blocks")
        x = np.hstack(blocks)
        groups, start = [], 0
        for b in blocks:
            groups.append(slice(start, start + b.shape[1]))
            start += b.shape[1]
        return cls(x.T @ x, x.T @ y, groups, weights, float(np.sum(y * y)))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.xty.shape)

    def _decomp(self, t):
        if self._eig[t] is None:
            g = self.groups[t]
            d, v = np.linalg.eigh(self.gram[g, g])
            d = np.where(d > 1e-12 * max(d.max(initial=0.0), 1e-300), d, 0.0)
            self._eig[t] = (d, v)
        return self._eig[t]

    def group_norms(self, mat: np.ndarray) -> np.ndarray:
        rows = np.sum(mat * mat, axis=1)
        return np.sqrt(np.add.reduceat(rows, self._starts))

    def correlation(self, beta: np.ndarray) -> np.ndarray:
        """``X'(Y - X beta)``."""
        return self.xty - self.gram @ beta

    def objective(self, beta: np.ndarray, lam: float) -> float:
        if self.yty is None:
            raise ContractError("objective needs ||Y||^2")
        fit = 0.5 * (self.yty - 2.0 * np.sum(beta * self.xty) + np.sum(beta * (self.gram @ beta)))
        pen = sum(w * np.linalg.norm(beta[g]) for g, w in zip(self.groups, self.weights))
        return float(fit + lam * pen)

    def kkt_violation(self, beta: np.ndarray, lam: float, corr: np.ndarray | None = None) -> float:
        """Largest stationarity violation, relative to ``max(lam, lambda_max)``."""
        if corr is None:
            corr = self.correlation(beta)
        worst = 0.0
        for t, g in enumerate(self.groups):
            worst = max(worst, self._group_violation(corr[g], beta[g], lam * self.weights[t]))
        return worst / self._scale(lam)

    def _scale(self, lam):
        return max(lam, self.lambda_max, 1e-300)

    @staticmethod
    def _group_violation(c, b, lam_t):
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return max(0.0, np.linalg.norm(c) - lam_t)
        return float(np.linalg.norm(c - lam_t * b / nb))

    def block_minimizer(self, t: int, r: np.ndarray, lam_t: float) -> np.ndarray:
        """Exact minimizer of ``0.5 b'G_tt b - <r, b> + lam_t ||b||``."""
        d, v = self._decomp(t)
        z = v.T @ r
        if np.linalg.norm(r) <= lam_t:
            return np.zeros_like(r)
        a = np.sum(z * z, axis=1)
        a = np.where(d > 0, a, 0.0)
        if lam_t == 0.0:
            inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
            return v @ (inv[:, None] * z)

        def phi(rho):
            return np.sum(a / (d * rho + lam_t) ** 2) - 1.0

        pos = d > 0
        if not np.any(pos & (a > 0)):
            return np.zeros_like(r)
        hi = math.sqrt(a.sum()) / d[pos].min()
        while phi(hi) > 0:
            hi *= 2.0
        rho = brentq(phi, 0.0, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
        return v @ ((rho / (d * rho + lam_t))[:, None] * z)

    def solve(self, lam: float, warm_start=None, tolerance: float = 1e-8, max_iters: int = 10_000) -> np.ndarray:
        """Block coordinate descent with a KKT-checked working set."""
        if lam < 0:
            raise ContractError("penalty must be non-negative")
        beta = self.zeros() if warm_start is None else np.array(warm_start, dtype=float)
        lam_w = lam * self.weights
        corr = self.correlation(beta)
        working = [t for t, g in enumerate(self.groups) if np.any(beta[g])]
        iters = 0
        scale = self._scale(lam)
        while True:
            excess = self.group_norms(corr) - lam_w > tolerance * scale
            excess[working] = False
            add = list(np.flatnonzero(excess))
            if not add and iters > 0:
                break
            working = sorted(set(working) | set(add))
            while True:
                iters += 1
                for t in working:
                    g = self.groups[t]
                    old = beta[g].copy()
                    new = self.block_minimizer(t, corr[g] + self.gram[g, g] @ old, lam_w[t])
                    delta = new - old
                    if np.any(delta):
                        beta[g] = new
                        corr -= self.gram[:, g] @ delta
                viol = self._working_violation(corr, beta, working, lam_w)
                if viol > tolerance * scale and iters % _NEWTON_EVERY == 0:
                    beta = self._newton_polish(beta, working, lam_w)
                    corr = self.correlation(beta)
                    viol = self._working_violation(corr, beta, working, lam_w)
                if viol <= tolerance * scale:
                    break
                if iters >= max_iters:
                    raise ConvergenceError(
                        f"group lasso did not converge in {max_iters} sweeps", kkt_violation=viol / scale
                    )
            corr = self.correlation(beta)
            working = [t for t in working if np.any(beta[self.groups[t]])]
        return beta

    def _working_violation(self, corr, beta, working, lam_w) -> float:
        return max(
            (self._group_violation(corr[self.groups[t]], beta[self.groups[t]], lam_w[t]) for t in working),
            default=0.0,
        )

    def _smooth_objective(self, beta, lam_w) -> float:
        pen = sum(lw * np.linalg.norm(beta[g]) for g, lw in zip(self.groups, lam_w))
        return float(0.5 * np.sum(beta * (self.gram @ beta)) - np.sum(beta * self.xty) + pen)

    def _newton_polish(self, beta, working, lam_w, steps: int = 30) -> np.ndarray:
        """Damped Newton iterations on the groups that are currently nonzero.

        Coordinate sweeps crawl when two active groups are nearly collinear;
        away from zero the penalty is smooth, so Newton converges quickly.
        Steps that do not decrease the objective are rejected.
        """
        active = [t for t in working if np.any(beta[self.groups[t]])]
        if not active:
            return beta
        r = beta.shape[1]
        cols = np.concatenate([np.arange(self.groups[t].start, self.groups[t].stop) for t in active])
        g_ss = self.gram[np.ix_(cols, cols)]
        eye_r = np.eye(r)
        beta = beta.copy()
        f_old = self._smooth_objective(beta, lam_w)
        for _ in range(steps):
            b = beta[cols]
            grad = g_ss @ b - self.xty[cols]
            hess = np.kron(g_ss, eye_r)
            pos = 0
            for t in active:
                k = self.groups[t].stop - self.groups[t].start
                bt = b[pos:pos + k].reshape(-1)
                nb = np.linalg.norm(bt)
                u = bt / nb
                grad[pos:pos + k] += lam_w[t] * b[pos:pos + k] / nb
                sl = slice(pos * r, (pos + k) * r)
                hess[sl, sl] += lam_w[t] / nb * (np.eye(k * r) - np.outer(u, u))
                pos += k
            try:
                step = np.linalg.solve(hess, grad.reshape(-1)).reshape(b.shape)
            except np.linalg.LinAlgError:
                break
            alpha, accepted = 1.0, False
            while alpha > 1e-6:
                trial = beta.copy()
                trial[cols] = b - alpha * step
                f_new = self._smooth_objective(trial, lam_w)
                if f_new <= f_old:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            converged = f_old - f_new <= 1e-15 * max(1.0, abs(f_old))
            beta, f_old = trial, f_new
            if converged:
                break
        return beta

    def split(self, beta: np.ndarray) -> list:
        return [beta[g].copy() for g in self.groups]

    def active(self, beta: np.ndarray) -> list:
        return [t for t, g in enumerate(self.groups) if np.any(beta[g])]


def lambda_max(target_block, predictor_blocks, weights=None) -> float:
    """Smallest penalty at which every group is zero.

    Equals ``max_t ||X_t' Y||_F / w_t``.
    """
    blocks = [np.asarray(b, dtype=float) for b in predictor_blocks]
    if not blocks or all(not np.any(b) for b in blocks):
        raise DegenerateError("all predictor blocks are identically zero")
    return GroupLassoProblem.from_blocks(target_block, blocks, weights).lambda_max


def solve_group_lasso(target_block, predictor_blocks, lam: float, warm_start=None, config: SolverConfig = SolverConfig(), weights=None):
    """Per-group coefficient matrices minimizing the group lasso objective.

    ``warm_start`` is a list of per-group matrices (or None).
    """
    prob = GroupLassoProblem.from_blocks(target_block, predictor_blocks, weights)
    warm = None if warm_start is None else np.vstack([np.asarray(w, dtype=float) for w in warm_start])
    beta = prob.solve(lam, warm, config.tolerance, config.max_iters)
    return prob.split(beta)


# ---------------------------------------------------------------------------
# Selection paths and adjacency
# ---------------------------------------------------------------------------


def _target_problem(gram_full: np.ndarray, p: int, k: int, j: int) -> tuple:
    cols = np.arange(p * k).reshape(p, k)
    others = [t for t in range(p) if t != j]
    idx = cols[others].reshape(-1)
    groups = [slice(i * k, (i + 1) * k) for i in range(len(others))]
    prob = GroupLassoProblem(gram_full[np.ix_(idx, idx)], gram_full[np.ix_(idx, cols[j])], groups)
    return prob, others


def _path_on_problem(prob: GroupLassoProblem, others: list, j: int, config: SolverConfig) -> SelectionPath:
    if config.p_max == 0 or prob.lambda_max == 0.0:
        return SelectionPath(j, ())
    lmax = prob.lambda_max
    solve = lambda c, warm: prob.solve(c * lmax, warm, config.tolerance, config.max_iters)  # noqa: E731

    def refine(hi, lo, beta_hi, cands, depth):
        if len(cands) == 1 or depth == 0:
            return [(t, lo) for t in sorted(cands)]
        mid = math.sqrt(hi * lo)
        beta_mid = solve(mid, beta_hi)
        early = cands & set(prob.active(beta_mid))
        out = []
        if early:
            out += refine(hi, mid, beta_hi, early, depth - 1)
        if cands - early:
            out += refine(mid, lo, beta_mid, cands - early, depth - 1)
        return out

    grid = config.c_grid()
    beta = prob.zeros()
    seen: set = set()
    entries: list = []
    for c_prev, c in zip(grid[:-1], grid[1:]):
        beta_prev = beta
        beta = solve(c, beta_prev)
        new = set(prob.active(beta)) - seen
        if new:
            found = refine(c_prev, c, beta_prev, new, config.refine_depth) if len(new) > 1 else [(new.pop(), c)]
            found.sort(key=lambda e: (-e[1], e[0]))
            for t, val in found:
                seen.add(t)
                entries.append((others[t], float(val)))
        if len(seen) >= config.p_max:
            break
    return SelectionPath(j, tuple(entries[: config.p_max]))


def feature_select_path(j: int, x_graph, config: SolverConfig = SolverConfig()) -> SelectionPath:
    """Selection path for target feature ``j``.

    ``x_graph`` is an EmbeddedTensor or an ``(n, p, k)`` array whose
    ``(feature, slot)`` columns are standardized.
    """
    data = x_graph.data if isinstance(x_graph, EmbeddedTensor) else np.asarray(x_graph, dtype=float)
    n, p, k = data.shape
    if p < 2:
        raise ContractError("feature selection needs at least two features")
    if not 0 <= j < p:
        raise ContractError(f"target index {j} out of range")
    flat = data.reshape(n, p * k)
    prob, others = _target_problem(flat.T @ flat, p, k, j)
    if all(not np.any(prob.gram[g, g]) for g in prob.groups):
        raise DegenerateError("all predictor blocks are identically zero")
    return _path_on_problem(prob, others, j, config)


def build_adjacency(paths: Sequence[SelectionPath], p: int) -> np.ndarray:
    """Row ``j`` holds the entry values of target ``j``'s selections; unit diagonal."""
    a = np.eye(p)
    targets = [path.target for path in paths]
    if len(set(targets)) != len(targets):
        raise ContractError("duplicate target in selection paths")
    for path in paths:
        if not 0 <= path.target < p or any(not 0 <= t < p for t in path.features):
            raise ContractError("feature index out of range")
        for t, c in path.selections:
            a[path.target, t] = c
    return a


def finalize(a: np.ndarray, theta: float = THETA_SYNTHETIC, paths=(), feature_names=()) -> KnowledgeGraph:
    """Symmetrize, prune entries below ``theta`` and normalize.

    ``a_norm = D a_sym D`` with ``D = diag(rowsum(a_sym) ** -0.5)``.
    """
    if not 0 < theta < 1:
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError("adjacency must be square")
    if np.any(a < 0) or np.any(a > 1) or not np.allclose(np.diag(a), 1.0):
        raise ContractError("adjacency entries must lie in [0, 1] with unit diagonal")
    sym = 0.5 * (a + a.T)
    sym[sym < theta] = 0.0
    dinv = 1.0 / np.sqrt(sym.sum(axis=1))
    norm = dinv[:, None] * sym * dinv[None, :]
    return KnowledgeGraph(a.copy(), sym, norm, float(theta), tuple(paths), tuple(feature_names))


def _paths_worker(args):
    gram, p, k, targets, config = args
    out = []
    for j in targets:
        prob, others = _target_problem(gram, p, k, j)
        out.append(_path_on_problem(prob, others, j, config))
    return out


def estimate_graph(
    x_graph: EmbeddedTensor,
    config: SolverConfig = SolverConfig(),
    theta: float = THETA_SYNTHETIC,
    rows: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> KnowledgeGraph:
    """Run every node-wise selection and finalize the graph.

    ``rows`` restricts estimation to a subset of entities; the subset is
    re-standardized first.
    """
    data = x_graph.data
    if rows is not None:
        data, _, _ = standardize(data[np.asarray(rows, dtype=int)])
    n, p, k = data.shape
    if p < 2:
        raise ContractError("graph estimation needs at least two features")
    if not 0 < theta < 1:
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    flat = data.reshape(n, p * k)
    gram = flat.T @ flat
    if not np.any(gram):
        raise DegenerateError("embedding is identically zero")
    targets = list(range(p))
    if n_jobs > 1:
        chunks = [targets[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(_paths_worker, [(gram, p, k, c, config) for c in chunks]))
        paths = sorted((pth for part in parts for pth in part), key=lambda s: s.target)
    else:
        paths = _paths_worker((gram, p, k, targets, config))
    return finalize(build_adjacency(paths, p), theta, paths, x_graph.feature_names)
