"""Synthetic multi-modal longitudinal scenarios.

Longitudinal features are zero-mean Matérn Gaussian processes on a grid
over ``[0, 1]``. A block of ``p_0`` interconnected features is built from
six base processes perturbed by noise that is correlated across features
and smoothed in time; two of them are collapsed to their time averages
(scalars) and four categoricals are read off random linear combinations of
the remaining four curves. Independent filler features complete the
requested modality proportions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.ndimage import gaussian_filter1d

from .embedding import Dataset, Feature, Modality
from .errors import ConfigError, GenerationError
from .fda import DiscreteSamples, Domain
from .seeds import rng_for

N_BASE = 6
N_INTER_LONG = 4
N_INTER_SCALAR = 2
CATEGORY_COUNTS = (2, 2, 3, 4)
_JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 300
    p: int = 20
    proportions: tuple = (0.6, 0.2, 0.2)
    p_0: int = 10
    grid_size: int = 100
    seed: int = 0
    eta2: float = 1.0
    length_scale: float = 0.25
    nu: float = 3.5
    noise_cov_floor: float = 0.4
    weight_range: tuple = (-3.0, 3.0)
    noise_scale: float = 1.0
    filter_sigma: float = 3.0
    category_counts: tuple = field(default=CATEGORY_COUNTS)

    def __post_init__(self):
        props = tuple(float(x) for x in self.proportions)
        object.__setattr__(self, "proportions", props)
        object.__setattr__(self, "weight_range", tuple(float(x) for x in self.weight_range))
        object.__setattr__(self, "category_counts", tuple(int(x) for x in self.category_counts))
        if len(props) != 3 or any(x < 0 for x in props) or abs(sum(props) - 1.0) > 1e-9:
            raise ConfigError(f"proportions must be three non-negative numbers summing to 1, got {self.proportions}")
        if self.n < 2 or self.p < 1 or self.grid_size < 5:
            raise ConfigError("need n >= 2, p >= 1 and grid_size >= 5")
        if self.p_0 not in (0, N_INTER_LONG + N_INTER_SCALAR + len(self.category_counts)):
            raise ConfigError(f"p_0 must be 0 or {N_INTER_LONG + N_INTER_SCALAR + len(self.category_counts)}")
        if self.p_0 > self.p:
            raise ConfigError("p_0 exceeds p")
        if min(self.category_counts, default=2) < 2:
            raise ConfigError("categorical features need at least two levels")
        if self.eta2 <= 0 or self.length_scale <= 0 or self.nu <= 0:
            raise ConfigError("Matérn parameters must be positive")
        if not 0 <= self.noise_cov_floor < 1:
            raise ConfigError("noise_cov_floor must lie in [0, 1)")
        lo, hi = self.weight_range
        if not lo < hi:
            raise ConfigError("weight_range must be increasing")
        self.composition()

    def composition(self):
        """Counts ``(longitudinal, categorical, scalar)`` over all ``p`` features."""
        n_long = int(math.floor(self.p * self.proportions[0] + 0.5))
        n_cat = int(math.floor(self.p * self.proportions[1] + 0.5))
        n_scalar = self.p - n_long - n_cat
        if self.p_0:
            need = (N_INTER_LONG, len(self.category_counts), N_INTER_SCALAR)
            if n_long < need[0] or n_cat < need[1] or n_scalar < need[2]:
                raise ConfigError(
                    f"proportions give ({n_long}, {n_cat}, {n_scalar}) features, "
                    f"fewer than the interconnected block needs {need}"
                )
        if n_scalar < 0:
            raise ConfigError("proportions leave a negative number of scalar features")
        return n_long, n_cat, n_scalar


def matern_cov(t, s, eta2: float = 1.0, l: float = 0.25, nu: float = 3.5):
    """Matérn covariance between time points ``t`` and ``s`` (broadcasting).

    Half-integer ``nu`` uses the exponential-polynomial closed form; other
    values go through :func:`scipy.special.kv`.
    """
    if eta2 <= 0 or l <= 0 or nu <= 0:
        raise ConfigError("Matérn parameters must be positive")
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))
    x = math.sqrt(2.0 * nu) * d / l
    m = nu - 0.5
    if abs(m - round(m)) < 1e-12 and m >= 0:
        m = int(round(m))
        poly = np.zeros_like(x)
        for i in range(m + 1):
            c = math.factorial(m + i) / (math.factorial(i) * math.factorial(m - i))
            poly = poly + c * (2.0 * x) ** (m - i)
        out = eta2 * np.exp(-x) * math.factorial(m) / math.factorial(2 * m) * poly
    else:
        if nu > 50:
            raise ConfigError("non-half-integer nu above 50 is outside the validated range")
        with np.errstate(invalid="ignore"):
            out = eta2 / (special.gamma(nu) * 2 ** (nu - 1)) * x**nu * special.kv(nu, x)
        out = np.where(x == 0, eta2, out)
    return out if np.ndim(out) else float(out)


def gram_matrix(grid, eta2=1.0, l=0.25, nu=3.5) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    return matern_cov(grid[:, None], grid[None, :], eta2, l, nu)


def _factor(gram: np.ndarray) -> np.ndarray:
    scale = float(np.mean(np.diag(gram)))
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(gram + jitter * scale * np.eye(gram.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise GenerationError("covariance matrix not factorizable even with maximal jitter")


def gp_draws(n: int, grid, cov_fn, rng: np.random.Generator) -> np.ndarray:
    """``(n, len(grid))`` matrix of zero-mean Gaussian process paths."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise GenerationError("grid needs at least two points")
    chol = _factor(cov_fn(grid[:, None], grid[None, :]))
    return rng.standard_normal((n, grid.size)) @ chol.T


def sample_gp(n: int, grid, cov_fn=matern_cov, seed: int = 0) -> list:
    """``n`` Gaussian process draws on ``grid`` as DiscreteSamples."""
    grid = np.asarray(grid, dtype=float)
    paths = gp_draws(n, grid, cov_fn, np.random.default_rng(seed))
    return [DiscreteSamples(grid, row) for row in paths]


def noise_correlation(dim: int, floor: float, rng: np.random.Generator) -> np.ndarray:
    """Random correlation matrix whose off-diagonal entries all exceed ``floor``.

    A normalized Wishart draw with non-negative factors (so its entries are
    non-negative) is shrunk towards the all-ones matrix:
    ``floor * 11' + (1 - floor) * R0`` stays PSD with unit diagonal.
    """
    g = rng.uniform(0.0, 1.0, size=(dim, dim + 2))
    w = g @ g.T
    d = np.sqrt(np.diag(w))
    r0 = w / np.outer(d, d)
    out = floor + (1.0 - floor) * r0
    np.fill_diagonal(out, 1.0)
    return out


def make_interconnected(base: np.ndarray, config: ScenarioConfig, rng: np.random.Generator):
    """Build the interconnected block from six base processes.

    Parameters
    ----------
    base : ndarray, shape (6, n, m)
        Base curves on the scenario grid.

    Returns
    -------
    longitudinal : ndarray, shape (4, n, m)
    scalars : ndarray, shape (2, n)
    categoricals : ndarray of int, shape (4, n)
        Level indices, ``0 .. levels-1``.
    """
    base = np.asarray(base, dtype=float)
    if base.ndim != 3 or base.shape[0] != N_BASE:
        raise GenerationError(f"expected {N_BASE} base features")
    _, n, m = base.shape
    corr = noise_correlation(N_BASE, config.noise_cov_floor, rng)
    chol = _factor(corr)
    noise = rng.standard_normal((n, m, N_BASE)) @ chol.T
    noise = gaussian_filter1d(noise, config.filter_sigma, axis=1, mode="reflect")
    # Unit pointwise variance after smoothing; the filter alone shrinks it by ~1/(2σ√π).
    noise /= np.sqrt(np.sum(_gaussian_weights(config.filter_sigma) ** 2))
    curves = base + config.noise_scale * np.moveaxis(noise, 2, 0)
    longitudinal = curves[:N_INTER_LONG]
    scalars = curves[N_INTER_LONG:].mean(axis=2)
    lo, hi = config.weight_range
    cats = []
    for levels in config.category_counts:
        w = rng.uniform(lo, hi, size=N_INTER_LONG)
        t_idx = int(rng.integers(m))
        v = np.tensordot(w, longitudinal[:, :, t_idx], axes=1)
        span = v.max() - v.min()
        u = 1.0 + (levels - 1) * (v - v.min()) / span if span > 0 else np.ones(n)
        cats.append(np.floor(u + 0.5).astype(int) - 1)
    return longitudinal, scalars, np.array(cats)


def _gaussian_weights(sigma: float) -> np.ndarray:
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _even_levels(n: int, levels: int, rng: np.random.Generator) -> np.ndarray:
    out = np.arange(n) % levels
    rng.shuffle(out)
    return out


def generate_scenario(config: ScenarioConfig = ScenarioConfig()) -> Dataset:
    """Full synthetic dataset, deterministic in ``config.seed``.

    Interconnected features come first (``ilong_*``, ``icat_*``,
    ``iscal_*``), followed by fillers (``long_*``, ``cat_*``, ``scal_*``).
    ``dataset.attrs["interconnected"]`` lists the block's feature names.
    """
    n_long, n_cat, n_scalar = config.composition()
    seed = config.seed
    domain = Domain(0.0, 1.0)
    grid = np.linspace(0.0, 1.0, config.grid_size)

    def cov(t, s):
        return matern_cov(t, s, config.eta2, config.length_scale, config.nu)

    features = []
    inter = []
    if config.p_0:
        base = gp_draws(N_BASE * config.n, grid, cov, rng_for(seed, "base"))
        base = base.reshape(N_BASE, config.n, grid.size)
        longs, scalars, cats = make_interconnected(base, config, rng_for(seed, "interconnect"))
        for i, curves in enumerate(longs):
            features.append(_long_feature(f"ilong_{i}", grid, curves))
        for i, (levels, codes) in enumerate(zip(config.category_counts, cats)):
            features.append(Feature(f"icat_{i}", Modality.categorical(levels), [int(c) for c in codes]))
        for i, vals in enumerate(scalars):
            features.append(Feature(f"iscal_{i}", Modality.scalar(), [float(v) for v in vals]))
        inter = [f.name for f in features]
        n_long -= N_INTER_LONG
        n_cat -= len(config.category_counts)
        n_scalar -= N_INTER_SCALAR
    if n_long:
        filler = gp_draws(n_long * config.n, grid, cov, rng_for(seed, "filler", "longitudinal"))
        filler = filler.reshape(n_long, config.n, grid.size)
        for i in range(n_long):
            features.append(_long_feature(f"long_{i}", grid, filler[i]))
    rng = rng_for(seed, "filler", "categorical")
    for i in range(n_cat):
        levels = int(rng.integers(2, 6))
        codes = _even_levels(config.n, levels, rng)
        features.append(Feature(f"cat_{i}", Modality.categorical(levels), [int(c) for c in codes]))
    rng = rng_for(seed, "filler", "scalar")
    for i in range(n_scalar):
        features.append(Feature(f"scal_{i}", Modality.scalar(), [float(v) for v in rng.standard_normal(config.n)]))
    entity_ids = [f"e{i:04d}" for i in range(config.n)]
    return Dataset(entity_ids, features, domain, attrs={"interconnected": inter, "seed": seed})


def _long_feature(name, grid, curves) -> Feature:
    return Feature(name, Modality.longitudinal(), [DiscreteSamples(grid, row) for row in curves])
