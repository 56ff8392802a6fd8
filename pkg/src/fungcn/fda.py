"""Basis systems, smoothing, inner products and functional PCA.

All integrals over a domain use composite Simpson quadrature on a fixed
equispaced grid of ``QUAD_POINTS`` points (see :func:`quadrature`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DomainError, FpcaError, InvalidBasisError, SmoothingError, ContractError

QUAD_POINTS = 201
DEGREE = 3
DEFAULT_PENALTY_GRID = tuple(np.logspace(-8, 2, 20))

_DOMAIN_SLACK = 1e-12
_MAX_CONDITION = 1e14


@dataclass(frozen=True)
class Domain:
    """Closed interval ``[t_min, t_max]``."""

    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        t_min, t_max = float(self.t_min), float(self.t_max)
        if not (np.isfinite(t_min) and np.isfinite(t_max)) or not t_min < t_max:
            raise DomainError(f"invalid domain [{self.t_min}, {self.t_max}]")
        object.__setattr__(self, "t_min", t_min)
        object.__setattr__(self, "t_max", t_max)

    @property
    def length(self) -> float:
        return self.t_max - self.t_min

    def check(self, t) -> np.ndarray:
        """Return ``t`` as an array, clipped onto the domain.

        Raises DomainError if any point lies outside by more than rounding slack.
        """
        t = np.asarray(t, dtype=float)
        slack = _DOMAIN_SLACK * max(1.0, self.length)
        if np.any(t < self.t_min - slack) or np.any(t > self.t_max + slack) or np.any(np.isnan(t)):
            raise DomainError(f"points outside domain [{self.t_min}, {self.t_max}]")
        return np.clip(t, self.t_min, self.t_max)


@lru_cache(maxsize=64)
def _simpson(t_min: float, t_max: float, n: int):
    grid = np.linspace(t_min, t_max, n)
    h = (t_max - t_min) / (n - 1)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= h / 3.0
    grid.setflags(write=False)
    w.setflags(write=False)
    return grid, w


def quadrature(domain: Domain, n: int = QUAD_POINTS):
    """Simpson grid and weights on ``domain``.

    ``n`` must be odd.
    """
    if n < 3 or n % 2 == 0:
        raise ContractError("Simpson quadrature needs an odd number of points >= 3")
    return _simpson(domain.t_min, domain.t_max, n)


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped cubic B-spline basis with equispaced interior knots.

    Attributes
    ----------
    k : int
        Number of basis functions.
    domain : Domain
    knots : tuple of float
        Full knot vector, length ``k + 4``, boundary knots repeated four times.
    """

    k: int
    domain: Domain
    knots: tuple = field(repr=False)
    degree: int = DEGREE

    @property
    def knot_array(self) -> np.ndarray:
        return np.asarray(self.knots)

    def __call__(self, t, derivative: int = 0) -> np.ndarray:
        """Design matrix ``(len(t), k)``; a scalar ``t`` gives a vector."""
        t_arr = self.domain.check(t)
        scalar = t_arr.ndim == 0
        mat = _design_matrix(self.knot_array, self.degree, np.atleast_1d(t_arr), derivative)
        return mat[0] if scalar else mat

    def gram(self, derivative: int = 0) -> np.ndarray:
        """Simpson approximation of ``∫ b_r^(d) b_s^(d) dt``."""
        return _gram(self, derivative)


def make_bspline_basis(k: int, domain: Domain = Domain()) -> BSplineBasis:
    """Clamped cubic basis with ``k`` functions on ``domain``.

    ``k - 4`` interior knots are placed equispaced; ``k = 4`` gives the
    Bernstein cubic basis.
    """
    if int(k) != k or k < DEGREE + 1:
        raise InvalidBasisError(f"cubic B-spline basis needs k >= 4, got {k}")
    k = int(k)
    n_interior = k - DEGREE - 1
    breaks = np.linspace(domain.t_min, domain.t_max, n_interior + 2)
    knots = np.concatenate(
        [np.full(DEGREE, domain.t_min), breaks, np.full(DEGREE, domain.t_max)]
    )
    return BSplineBasis(k=k, domain=domain, knots=tuple(float(x) for x in knots))


def eval_basis(basis: BSplineBasis, t: float) -> np.ndarray:
    """Values of all ``k`` basis functions at a single point."""
    if np.ndim(t) != 0:
        raise ContractError("eval_basis takes a scalar; call the basis for arrays")
    return basis(t)


def _spans(knots: np.ndarray, degree: int, t: np.ndarray) -> np.ndarray:
    n_funcs = len(knots) - degree - 1
    idx = np.searchsorted(knots, t, side="right") - 1
    return np.clip(idx, degree, n_funcs - 1)


def _nonzero_funcs(knots: np.ndarray, degree: int, t: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Triangular Cox-de Boor scheme; returns ``(m, degree + 1)`` values of
    ``N_{span - degree}, ..., N_{span}``."""
    m = t.shape[0]
    vals = np.zeros((m, degree + 1))
    vals[:, 0] = 1.0
    left = np.zeros((m, degree + 1))
    right = np.zeros((m, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals


def _design_matrix(knots: np.ndarray, degree: int, t: np.ndarray, derivative: int = 0) -> np.ndarray:
    if derivative > degree:
        return np.zeros((t.shape[0], len(knots) - degree - 1))
    low = degree - derivative
    # The span search uses the target degree so that the nonempty interval
    # convention is shared by every order of the derivative chain.
    span = _spans(knots, degree, t)
    vals = _nonzero_funcs(knots, low, t, span)
    n_low = len(knots) - low - 1
    mat = np.zeros((t.shape[0], n_low))
    rows = np.arange(t.shape[0])
    for r in range(low + 1):
        mat[rows, span - low + r] = vals[:, r]
    for p in range(low + 1, degree + 1):
        mat = mat @ _derivative_operator(knots, p)
    return mat


def _derivative_operator(knots: np.ndarray, p: int) -> np.ndarray:
    """Matrix ``Q`` with ``B_p' = B_{p-1} Q`` on a shared knot vector."""
    n_p = len(knots) - p - 1
    q = np.zeros((n_p + 1, n_p))
    for i in range(n_p):
        d1 = knots[i + p] - knots[i]
        d2 = knots[i + p + 1] - knots[i + 1]
        if d1 > 0:
            q[i, i] = p / d1
        if d2 > 0:
            q[i + 1, i] = -p / d2
    return q


@lru_cache(maxsize=64)
def _gram_cached(knots: tuple, degree: int, t_min: float, t_max: float, derivative: int):
    grid, w = _simpson(t_min, t_max, QUAD_POINTS)
    b = _design_matrix(np.asarray(knots), degree, grid, derivative)
    g = b.T @ (w[:, None] * b)
    g = 0.5 * (g + g.T)
    g.setflags(write=False)
    return g


def _gram(basis: BSplineBasis, derivative: int) -> np.ndarray:
    return _gram_cached(basis.knots, basis.degree, basis.domain.t_min, basis.domain.t_max, derivative)


# ---------------------------------------------------------------------------
# Curves and inner products
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Curve:
    """A function represented by coefficients over a B-spline basis."""

    basis: BSplineBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.shape[0] != self.basis.k:
            raise ContractError(f"curve has {c.shape[0]} coefficients for a basis of size {self.basis.k}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def domain(self) -> Domain:
        return self.basis.domain

    def __call__(self, t):
        return self.basis(t) @ self.coeffs


Function = Union[Curve, Callable[[np.ndarray], np.ndarray]]


def _on_grid(f: Function, grid: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(grid), dtype=float)
    if vals.ndim == 0:
        vals = np.full(grid.shape, float(vals))
    return vals


def _common_domain(f, g, domain):
    doms = [x.domain for x in (f, g) if isinstance(x, Curve)]
    if domain is not None:
        doms.append(domain)
    if not doms:
        raise DomainError("a domain is required when neither argument is a Curve")
    if any(d != doms[0] for d in doms[1:]):
        raise DomainError("functions live on different domains")
    return doms[0]


def inner_product(f: Function, g: Function, domain: Domain | None = None) -> float:
    """``∫ f g dt`` by Simpson quadrature.

    Plain callables are accepted when ``domain`` is given or the other
    argument is a Curve.
    """
    dom = _common_domain(f, g, domain)
    grid, w = quadrature(dom)
    return float(np.dot(w, _on_grid(f, grid) * _on_grid(g, grid)))


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteSamples:
    """Noisy observations of one curve at strictly increasing times."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float).reshape(-1)
        if t.shape != v.shape:
            raise ContractError("times and values differ in length")
        if t.shape[0] < DEGREE + 2:
            raise ContractError(f"need at least {DEGREE + 2} samples, got {t.shape[0]}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ContractError("samples contain non-finite entries")
        if np.any(np.diff(t) <= 0):
            raise ContractError("sample times must be strictly increasing")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)


def gcv_path(times, values, basis: BSplineBasis, penalty_grid: Sequence[float] = DEFAULT_PENALTY_GRID):
    """Penalized least-squares fits for every penalty in the grid.

    ``values`` may be a vector or an ``(m, n_curves)`` matrix sharing ``times``.

    Returns
    -------
    coeffs : ndarray, shape (n_penalties, k, n_curves)
        NaN where the normal equations were singular.
    gcv : ndarray, shape (n_penalties, n_curves)
        ``m * RSS / (m - tr S)^2``; ``inf`` where undefined.
    """
    lam = np.asarray(penalty_grid, dtype=float).reshape(-1)
    if lam.size == 0 or np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise ContractError("penalty grid must be non-empty and positive")
    t = basis.domain.check(times)
    y = np.asarray(values, dtype=float)
    y = y.reshape(t.shape[0], -1)
    m = t.shape[0]
    b = basis(t)
    btb = b.T @ b
    bty = b.T @ y
    pen = basis.gram(derivative=2)
    coeffs = np.full((lam.size, basis.k, y.shape[1]), np.nan)
    gcv = np.full((lam.size, y.shape[1]), np.inf)
    for i, l in enumerate(lam):
        lhs = btb + l * pen
        if np.linalg.cond(lhs) > _MAX_CONDITION:
            continue
        try:
            sol = np.linalg.solve(lhs, np.column_stack([bty, btb]))
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(sol)):
            continue
        c = sol[:, : y.shape[1]]
        trace = float(np.trace(sol[:, y.shape[1]:]))
        resid = y - b @ c
        rss = np.sum(resid**2, axis=0)
        dof = m - trace
        coeffs[i] = c
        if dof > 1e-8 * m:
            gcv[i] = m * rss / dof**2
    return coeffs, gcv


def _select(coeffs, gcv):
    ok = np.isfinite(coeffs).all(axis=1)
    if not ok.any(axis=0).all():
        raise SmoothingError("normal equations singular at every penalty")
    score = np.where(ok, gcv, np.inf)
    best = np.argmin(score, axis=0)
    # All-infinite GCV (no residual degrees of freedom): take the first solvable fit.
    undefined = ~np.isfinite(score[best, np.arange(score.shape[1])])
    if undefined.any():
        best[undefined] = np.argmax(ok[:, undefined], axis=0)
    return coeffs[best, :, np.arange(coeffs.shape[2])], best


def smooth_samples(
    samples: DiscreteSamples,
    basis: BSplineBasis,
    penalty_grid: Sequence[float] = DEFAULT_PENALTY_GRID,
) -> Curve:
    """Fit a curve with a second-derivative roughness penalty chosen by GCV."""
    coeffs, gcv = gcv_path(samples.times, samples.values, basis, penalty_grid)
    c, _ = _select(coeffs, gcv)
    return Curve(basis, c[0])


def smooth_many(times, values, basis: BSplineBasis, penalty_grid=DEFAULT_PENALTY_GRID) -> np.ndarray:
    """Smooth several curves observed at shared times.

    ``values`` is ``(m, n_curves)``; returns coefficients ``(n_curves, k)``,
    with the penalty selected per curve.
    """
    coeffs, gcv = gcv_path(times, values, basis, penalty_grid)
    c, _ = _select(coeffs, gcv)
    return c


# ---------------------------------------------------------------------------
# Functional PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FpcBasis:
    """Mean curve plus orthonormal principal component curves."""

    mean_curve: Curve
    components: list
    eigenvalues: np.ndarray
    quad_grid: np.ndarray
    total_variance: float

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def component_coeffs(self) -> np.ndarray:
        return np.vstack([c.coeffs for c in self.components])

    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros(self.k)
        return self.eigenvalues / self.total_variance


def fpca(curves: Sequence[Curve], k_graph: int) -> FpcBasis:
    """Eigen-decomposition of the sample covariance operator.

    The covariance kernel is evaluated on the quadrature grid with Simpson
    weights; since every curve lies in the span of a shared basis the
    non-trivial eigenfunctions lie there too, so the weighted grid
    eigenproblem is solved in coefficient form ``Σ G a = λ a`` with
    ``G`` the Simpson Gram matrix of the basis.
    """
    if len(curves) < 2:
        raise FpcaError("fpca needs at least two curves")
    basis = curves[0].basis
    if any(c.basis != basis for c in curves):
        raise FpcaError("curves do not share a basis")
    return fpca_coeffs(np.vstack([c.coeffs for c in curves]), basis, k_graph)


def fpca_coeffs(coeffs: np.ndarray, basis: BSplineBasis, k_graph: int) -> FpcBasis:
    """:func:`fpca` on an ``(n, k)`` coefficient matrix."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = coeffs.shape[0]
    grid, _ = quadrature(basis.domain)
    if n < 2:
        raise FpcaError("fpca needs at least two curves")
    if k_graph < 1 or k_graph > min(n - 1, grid.size, basis.k):
        raise FpcaError(f"k_graph={k_graph} exceeds min(n-1, grid size, basis size)")
    mean = coeffs.mean(axis=0)
    centered = coeffs - mean
    cov = centered.T @ centered / n
    gram = basis.gram()
    chol = np.linalg.cholesky(gram)
    sym = chol.T @ cov @ chol
    sym = 0.5 * (sym + sym.T)
    evals, evecs = np.linalg.eigh(sym)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # a = L^{-T} v gives a^T G a = v^T v = 1.
    comps = np.linalg.solve(chol.T, evecs[:, :k_graph])
    comps = comps.T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return FpcBasis(
        mean_curve=Curve(basis, mean),
        components=[Curve(basis, c) for c in comps],
        eigenvalues=evals[:k_graph].copy(),
        quad_grid=np.asarray(grid).copy(),
        total_variance=float(np.sum(evals)),
    )


def project(x, fpc: FpcBasis, penalty_grid=DEFAULT_PENALTY_GRID) -> np.ndarray:
    """Scores ``⟨x - mean, φ_s⟩`` for ``s = 1..k_graph``.

    ``x`` may be a Curve, DiscreteSamples (smoothed onto the mean curve's
    basis first) or a callable on the domain.
    """
    if isinstance(x, DiscreteSamples):
        x = smooth_samples(x, fpc.mean_curve.basis, penalty_grid)
    if isinstance(x, Curve) and x.domain != fpc.mean_curve.domain:
        raise DomainError("curve and FPC basis live on different domains")
    grid, w = quadrature(fpc.mean_curve.domain)
    resid = _on_grid(x, grid) - fpc.mean_curve(grid)
    phi = fpc.mean_curve.basis(grid) @ fpc.component_coeffs.T
    return (w * resid) @ phi


def project_coeffs(coeffs: np.ndarray, fpc: FpcBasis) -> np.ndarray:
    """Scores for an ``(n, k)`` matrix of coefficients in the FPC curves' basis."""
    gram = fpc.mean_curve.basis.gram()
    return (np.asarray(coeffs) - fpc.mean_curve.coeffs) @ gram @ fpc.component_coeffs.T
