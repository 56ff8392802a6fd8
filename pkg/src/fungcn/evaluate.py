"""Decoding network outputs and scoring them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import CATEGORICAL, LONGITUDINAL, CategoryCodebook, EmbeddedTensor
from .errors import ContractError
from .fda import QUAD_POINTS, BSplineBasis, Curve, Domain, quadrature
from .gcn import FORECAST, TrainedModel, forecast_split_sizes, predict

_CONSTANT_TOL = 1e-12


@dataclass
class Prediction:
    """Decoded output for one target over a set of entities.

    ``values`` holds Curves (longitudinal), floats (scalar) or level
    indices (categorical).
    """

    feature: str
    kind: str
    raw: np.ndarray
    coeffs: np.ndarray
    values: list = field(default_factory=list)


def coeffs_to_curve(coeffs, basis: BSplineBasis, stats) -> Curve:
    """Destandardize one coefficient row and wrap it as a Curve.

    ``stats`` is the ``(mean, sd)`` pair of the feature's slots.
    """
    if stats is None:
        raise ContractError("standardization statistics are required")
    mean, sd = (np.asarray(s, dtype=float) for s in stats)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.k,) or mean.shape != coeffs.shape or sd.shape != coeffs.shape:
        raise ContractError(f"expected {basis.k} coefficients and statistics")
    return Curve(basis, coeffs * sd + mean)


def decode_categorical(pred_vector, codebook: CategoryCodebook, stats=None) -> int:
    """Nearest level in standardized space; ties go to the lowest index."""
    vectors = np.asarray(codebook.vectors, dtype=float)
    if vectors.size == 0:
        raise ContractError("empty codebook")
    if stats is not None:
        mean, sd = stats
        vectors = (vectors - mean) / sd
    pred = np.asarray(pred_vector, dtype=float)
    if pred.shape != (vectors.shape[1],):
        raise ContractError("prediction length differs from the codebook dimension")
    dist = np.sum((vectors - pred) ** 2, axis=1)
    return int(np.argmin(dist))


def _curve_grid(curves: Sequence, grid) -> np.ndarray:
    return np.array([c(grid) if isinstance(c, Curve) else np.asarray(c(grid), dtype=float) for c in curves])


def std_rmse_details(truth: Sequence, pred: Sequence, domain: Domain | None = None) -> tuple:
    """std-RMSE and the number of skipped (constant-truth) entities.

    Plain callables are accepted when at least one Curve or ``domain`` fixes
    the integration range.
    """
    if len(truth) != len(pred):
        raise ContractError("truth and prediction lists differ in length")
    if not truth:
        raise ContractError("no curves to score")
    domains = {c.domain for c in list(truth) + list(pred) if isinstance(c, Curve)}
    if domain is not None:
        domains.add(domain)
    if len(domains) != 1:
        raise ContractError("curves live on different domains" if domains else "no domain to integrate over")
    domain = domains.pop()
    grid, weights = quadrature(domain, QUAD_POINTS)
    y, yhat = _curve_grid(truth, grid), _curve_grid(pred, grid)
    return std_rmse_grid(y, yhat, weights)


def std_rmse_grid(y: np.ndarray, yhat: np.ndarray, weights: np.ndarray) -> tuple:
    """Same as :func:`std_rmse_details` for curves already on the grid."""
    sd = y.std(axis=1)
    scale = np.maximum(1.0, np.abs(y).max(axis=1))
    keep = sd > _CONSTANT_TOL * scale
    skipped = int(np.sum(~keep))
    if skipped:
        warnings.warn(f"{skipped} constant true curve(s) excluded from std-RMSE", RuntimeWarning, stacklevel=2)
    if not keep.any():
        raise ContractError("every true curve is constant")
    ise = ((y - yhat) ** 2) @ weights
    return float(np.sqrt(np.mean(ise[keep] / sd[keep]))), skipped


def std_rmse(truth: Sequence, pred: Sequence, domain: Domain | None = None) -> float:
    """Root of the mean over entities of ``integral (Y - Yhat)^2 / sd(Y)``.

    ``sd(Y)`` is the population standard deviation of the true curve on the
    quadrature grid. Entities with constant truths are skipped.
    """
    return std_rmse_details(truth, pred, domain)[0]


def accuracy(truth, pred) -> float:
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ContractError("truth and prediction differ in length")
    if truth.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(truth == pred))


def majority_rate(levels) -> float:
    """Share of the most frequent level."""
    levels = np.asarray(levels, dtype=int)
    if levels.size == 0:
        raise ContractError("empty level vector")
    return float(np.bincount(levels).max() / levels.size)


# ---------------------------------------------------------------------------
# Model-level decoding
# ---------------------------------------------------------------------------


def decode(model: TrainedModel, x_gcn: EmbeddedTensor, rows: Sequence[int]) -> list:
    """Predict ``rows`` of ``x_gcn`` and map each target back to its feature space.

    In forecast mode the curve combines the entity's observed history
    coefficients with the predicted horizon block.
    """
    rows = np.asarray(rows, dtype=int)
    out = predict(model, x_gcn.subset(rows))
    task = model.task
    preds = []
    for t, j in enumerate(task.indices):
        name = x_gcn.feature_names[j]
        kind = x_gcn.modalities[j].kind
        mean, sd = x_gcn.mean[j], x_gcn.sd[j]
        z = out[:, t, :]
        if task.mode == FORECAST:
            k1, _ = forecast_split_sizes(x_gcn.k, task.r_f)
            z = np.concatenate([x_gcn.data[rows, j, :k1], z], axis=1)
        coeffs = z * sd + mean
        if kind == LONGITUDINAL:
            basis = x_gcn.bases[name]
            values = [Curve(basis, c) for c in coeffs]
        elif kind == CATEGORICAL:
            book = x_gcn.codebooks[name]
            values = [decode_categorical(v, book, (mean, sd)) for v in z]
        else:
            values = [float(np.mean(c)) for c in coeffs]
        preds.append(Prediction(name, kind, z, coeffs, values))
    return preds


def truth_curves(x_gcn: EmbeddedTensor, feature: str, rows: Sequence[int]) -> list:
    """Smoothed true curves of a longitudinal feature."""
    j = x_gcn.index(feature)
    raw = x_gcn.raw()[np.asarray(rows, dtype=int), j]
    return [Curve(x_gcn.bases[feature], c) for c in raw]


def per_entity_mean_curves(curves: Sequence[Curve]) -> list:
    """Baseline predicting each entity's own temporal mean."""
    out = []
    for c in curves:
        grid, w = quadrature(c.domain, QUAD_POINTS)
        level = float(c(grid) @ w) / c.domain.length
        out.append(Curve(c.basis, np.full(c.basis.k, level)))
    return out
