"""Multi-modal datasets and their tensor embeddings.

A :class:`Dataset` holds ``n`` entities by ``p`` features of three
modalities. :func:`assemble` maps it to a standardized ``n x p x k``
tensor, either for graph estimation (``kind="graph"``: FPC scores) or for
the network (``kind="gcn"``: cubic B-spline coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ContractError, EmbeddingError, FunGCNError
from .fda import (
    DEFAULT_PENALTY_GRID,
    BSplineBasis,
    DiscreteSamples,
    Domain,
    FpcBasis,
    fpca_coeffs,
    make_bspline_basis,
    project_coeffs,
    smooth_many,
)
from .seeds import derive_seed

LONGITUDINAL = "longitudinal"
CATEGORICAL = "categorical"
SCALAR = "scalar"
GRAPH = "graph"
GCN = "gcn"

K_GRAPH = 3
K_GCN = {"classification": 5, "regression": 10, "forecast": 20}
K_SMOOTH = 20

_CONSTANT_TOL = 1e-12


@dataclass(frozen=True)
class Modality:
    kind: str
    levels: int | None = None
    labels: tuple | None = None

    def __post_init__(self):
        if self.kind not in (LONGITUDINAL, CATEGORICAL, SCALAR):
            raise ContractError(f"unknown modality {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.levels is None or self.levels < 2:
                raise ContractError("categorical features need at least 2 levels")
            labels = tuple(str(x) for x in self.labels) if self.labels is not None else tuple(
                str(i) for i in range(self.levels)
            )
            if len(labels) != self.levels or len(set(labels)) != self.levels:
                raise ContractError("categorical labels must be distinct, one per level")
            object.__setattr__(self, "labels", labels)
        elif self.levels is not None:
            raise ContractError(f"{self.kind} features have no levels")

    @classmethod
    def longitudinal(cls):
        return cls(LONGITUDINAL)

    @classmethod
    def scalar(cls):
        return cls(SCALAR)

    @classmethod
    def categorical(cls, levels, labels=None):
        return cls(CATEGORICAL, int(levels), labels)


@dataclass
class Feature:
    """One column of a dataset.

    ``values`` has one entry per entity: DiscreteSamples for longitudinal
    features, a level index for categorical ones and a float for scalars.
    """

    name: str
    modality: Modality
    values: list


@dataclass
class Dataset:
    entity_ids: list
    features: list
    domain: Domain = field(default_factory=Domain)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entity_ids = [str(e) for e in self.entity_ids]
        self.validate()

    @property
    def n(self) -> int:
        return len(self.entity_ids)

    @property
    def p(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list:
        return [f.name for f in self.features]

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise ContractError(f"unknown feature {name!r}")

    def index(self, name: str) -> int:
        return self.feature_names.index(self.feature(name).name)

    def validate(self):
        if len(set(self.entity_ids)) != self.n:
            raise ContractError("duplicate entity ids")
        names = self.feature_names
        if len(set(names)) != len(names):
            raise ContractError("duplicate feature names")
        for f in self.features:
            if len(f.values) != self.n:
                raise ContractError(f"feature {f.name!r} has {len(f.values)} values for {self.n} entities")
            for eid, v in zip(self.entity_ids, f.values):
                if v is None:
                    raise ContractError(f"missing value for entity {eid!r}, feature {f.name!r}")
                kind = f.modality.kind
                if kind == LONGITUDINAL:
                    if not isinstance(v, DiscreteSamples):
                        raise ContractError(f"feature {f.name!r}: entity {eid!r} needs samples")
                    self.domain.check(v.times)
                elif kind == CATEGORICAL:
                    if int(v) != v or not 0 <= int(v) < f.modality.levels:
                        raise ContractError(f"feature {f.name!r}: level {v} out of range for entity {eid!r}")
                elif not np.isfinite(float(v)):
                    raise ContractError(f"feature {f.name!r}: non-finite scalar for entity {eid!r}")

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = list(rows)
        feats = [Feature(f.name, f.modality, [f.values[i] for i in rows]) for f in self.features]
        return Dataset([self.entity_ids[i] for i in rows], feats, self.domain, dict(self.attrs))


@dataclass(frozen=True, eq=False)
class CategoryCodebook:
    """Static vectors, one row per level of a categorical feature."""

    feature: str
    vectors: np.ndarray
    seed: int

    @property
    def levels(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class EmbeddedTensor:
    """Standardized ``n x p x k`` embedding with what is needed to invert it.

    ``mean`` and ``sd`` are the ``p x k`` per-slot statistics removed from the
    raw embedding; ``bases`` maps longitudinal feature names to their
    B-spline basis (gcn kind) or FPC basis (graph kind).
    """

    data: np.ndarray
    kind: str
    k: int
    mean: np.ndarray
    sd: np.ndarray
    feature_names: tuple
    modalities: tuple
    entity_ids: tuple
    codebooks: dict
    bases: dict
    seed: int

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise ContractError(f"unknown feature {name!r}") from None

    def raw(self) -> np.ndarray:
        return destandardize(self.data, self.mean, self.sd)

    def subset(self, rows: Sequence[int]) -> "EmbeddedTensor":
        rows = np.asarray(rows, dtype=int)
        return replace(self, data=self.data[rows], entity_ids=tuple(self.entity_ids[i] for i in rows))

    def restandardize(self, rows: Sequence[int]) -> "EmbeddedTensor":
        """Recompute the statistics from ``rows`` only and apply them to all entities."""
        raw = self.raw()
        _, mean, sd = standardize(raw[np.asarray(rows, dtype=int)])
        z = (raw - mean) / sd
        return replace(self, data=z, mean=mean, sd=sd)


# ---------------------------------------------------------------------------
# Per-modality embeddings
# ---------------------------------------------------------------------------


def _longitudinal_coeffs(feature: Feature, basis: BSplineBasis, penalty_grid) -> np.ndarray:
    """Smooth every entity's samples; entities sharing sample times are batched."""
    if feature.modality.kind != LONGITUDINAL:
        raise ContractError(f"feature {feature.name!r} is not longitudinal")
    out = np.empty((len(feature.values), basis.k))
    groups: dict = {}
    for i, s in enumerate(feature.values):
        groups.setdefault(s.times.tobytes(), []).append(i)
    for rows in groups.values():
        times = feature.values[rows[0]].times
        vals = np.column_stack([feature.values[i].values for i in rows])
        out[rows] = smooth_many(times, vals, basis, penalty_grid)
    return out


def embed_longitudinal_kg(
    dataset: Dataset,
    feature: str,
    k_graph: int = K_GRAPH,
    k_smooth: int = K_SMOOTH,
    penalty_grid=DEFAULT_PENALTY_GRID,
):
    """FPC scores of one longitudinal feature.

    Curves are first smoothed onto a ``k_smooth`` cubic B-spline basis.

    Returns
    -------
    scores : ndarray, shape (n, k_graph)
    fpc : FpcBasis
    """
    feat = dataset.feature(feature)
    basis = make_bspline_basis(k_smooth, dataset.domain)
    coeffs = _longitudinal_coeffs(feat, basis, penalty_grid)
    fpc = fpca_coeffs(coeffs, basis, k_graph)
    return project_coeffs(coeffs, fpc), fpc


def embed_longitudinal_gcn(dataset: Dataset, feature: str, k_gcn: int = 10, penalty_grid=DEFAULT_PENALTY_GRID):
    """Penalized B-spline coefficients, shape ``(n, k_gcn)``, and the basis."""
    feat = dataset.feature(feature)
    basis = make_bspline_basis(k_gcn, dataset.domain)
    return _longitudinal_coeffs(feat, basis, penalty_grid), basis


def embed_categorical(feature: str, levels: int, k: int, seed: int) -> CategoryCodebook:
    """Draw one standard-normal ``k``-vector per level."""
    if levels < 2 or k < 1:
        raise ContractError("need levels >= 2 and k >= 1")
    vectors = np.random.default_rng(seed).standard_normal((levels, k))
    vectors.setflags(write=False)
    return CategoryCodebook(feature, vectors, int(seed))


def embed_scalar(value: float, k: int, kind: str, center: float = 0.0, domain: Domain = Domain()) -> np.ndarray:
    """Embedding of the constant function ``t -> value``.

    For ``kind="gcn"`` these are its B-spline coefficients (all equal to the
    value). For ``kind="graph"`` the FPC basis of an ensemble of constants
    has a single non-trivial component, the normalized constant function,
    so the score vector is ``((value - center) * sqrt(|T|), 0, ..., 0)``
    where ``center`` is the ensemble mean.
    """
    value = float(value)
    if not np.isfinite(value):
        raise ContractError("scalar value must be finite")
    if kind == GCN:
        return np.full(k, value)
    if kind == GRAPH:
        out = np.zeros(k)
        out[0] = (value - center) * np.sqrt(domain.length)
        return out
    raise ContractError(f"unknown embedding kind {kind!r}")


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(data: np.ndarray):
    """Z-score every ``(feature, slot)`` across entities (axis 0).

    Uses the population standard deviation. Constant slots become 0 and get
    ``sd = 1`` recorded.

    Returns
    -------
    z, mean, sd
    """
    data = np.asarray(data, dtype=float)
    if data.shape[0] < 2:
        raise ContractError("standardization needs at least two entities")
    mean = data.mean(axis=0)
    sd = data.std(axis=0)
    constant = sd <= _CONSTANT_TOL * np.maximum(1.0, np.abs(mean))
    sd = np.where(constant, 1.0, sd)
    z = (data - mean) / sd
    z[:, constant] = 0.0
    return z, mean, sd


def destandardize(z: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return np.asarray(z) * sd + mean


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def codebook_seed(seed: int, kind: str, feature: str) -> int:
    return derive_seed(seed, "codebook", kind, feature)


def assemble(
    dataset: Dataset,
    kind: str,
    k: int,
    seed: int = 0,
    k_smooth: int = K_SMOOTH,
    penalty_grid=DEFAULT_PENALTY_GRID,
) -> EmbeddedTensor:
    """Embed every feature and stack into a standardized tensor.

    Feature order follows the dataset. Failures are collected over all
    features and raised together as :class:`EmbeddingError`.
    """
    if kind not in (GRAPH, GCN):
        raise ContractError(f"unknown embedding kind {kind!r}")
    raw = np.zeros((dataset.n, dataset.p, k))
    codebooks: dict[str, CategoryCodebook] = {}
    bases: dict[str, Any] = {}
    failures = {}
    for j, feat in enumerate(dataset.features):
        try:
            mod = feat.modality.kind
            if mod == LONGITUDINAL:
                if kind == GRAPH:
                    raw[:, j], bases[feat.name] = embed_longitudinal_kg(dataset, feat.name, k, k_smooth, penalty_grid)
                else:
                    raw[:, j], bases[feat.name] = embed_longitudinal_gcn(dataset, feat.name, k, penalty_grid)
            elif mod == CATEGORICAL:
                book = embed_categorical(feat.name, feat.modality.levels, k, codebook_seed(seed, kind, feat.name))
                codebooks[feat.name] = book
                raw[:, j] = book.vectors[np.asarray(feat.values, dtype=int)]
            else:
                vals = np.asarray(feat.values, dtype=float)
                center = float(vals.mean())
                raw[:, j] = [embed_scalar(v, k, kind, center, dataset.domain) for v in vals]
        except FunGCNError as exc:
            failures[feat.name] = exc
    if failures:
        raise EmbeddingError(failures)
    z, mean, sd = standardize(raw)
    return EmbeddedTensor(
        data=z,
        kind=kind,
        k=k,
        mean=mean,
        sd=sd,
        feature_names=tuple(dataset.feature_names),
        modalities=tuple(f.modality for f in dataset.features),
        entity_ids=tuple(dataset.entity_ids),
        codebooks=codebooks,
        bases=bases,
        seed=int(seed),
    )


def standardized_codebook(tensor: EmbeddedTensor, feature: str) -> np.ndarray:
    """Codebook rows mapped into the tensor's standardized space."""
    j = tensor.index(feature)
    book = tensor.codebooks[feature]
    return (book.vectors - tensor.mean[j]) / tensor.sd[j]
