"""Two-layer graph convolutional network with hand-written gradients.

For one entity with input ``X`` (``p x k1``) and normalized adjacency ``A``::

    H1 = relu(A X W1 + b1)
    H2 = relu(A H1 W2 + b2)
    out[tau] = H2[target_tau] W_out[tau] + b_out[tau]

Everything is vectorized over a leading entity axis. Training minimizes the
mean squared error against the target rows with Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .embedding import CATEGORICAL, LONGITUDINAL, EmbeddedTensor
from .errors import ConfigError, ContractError, DivergenceError
from .graph import KnowledgeGraph
from .seeds import rng_for

REGRESSION = "regression"
CLASSIFICATION = "classification"
STATIC = "static"
FORECAST = "forecast"

HIDDEN = 32
LEARNING_RATE = {REGRESSION: 5e-5, CLASSIFICATION: 1e-4, FORECAST: 1e-4}
FORECAST_RATIO = 0.3


@dataclass(frozen=True)
class TaskSpec:
    """Targets as ``(feature index, task)`` pairs plus the mode."""

    targets: tuple
    mode: str = STATIC
    r_f: float = FORECAST_RATIO

    def __post_init__(self):
        targets = tuple((int(j), str(t)) for j, t in self.targets)
        object.__setattr__(self, "targets", targets)
        if not targets:
            raise ConfigError("at least one target is required")
        if len({j for j, _ in targets}) != len(targets):
            raise ConfigError("duplicate target feature")
        if any(t not in (REGRESSION, CLASSIFICATION) for _, t in targets):
            raise ConfigError("target tasks must be regression or classification")
        if self.mode not in (STATIC, FORECAST):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == FORECAST:
            if not 0 < self.r_f < 1:
                raise ConfigError("forecast ratio must lie in (0, 1)")
            if any(t != REGRESSION for _, t in targets):
                raise ConfigError("forecast targets must be regression targets")

    @property
    def indices(self) -> list:
        return [j for j, _ in self.targets]

    @property
    def name(self) -> str:
        if self.mode == FORECAST:
            return FORECAST
        kinds = {t for _, t in self.targets}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def check(self, modalities: Sequence) -> None:
        """Validate targets against feature modalities."""
        for j, t in self.targets:
            if not 0 <= j < len(modalities):
                raise ContractError(f"target index {j} out of range")
            kind = modalities[j].kind
            if t == CLASSIFICATION and kind != CATEGORICAL:
                raise ContractError(f"classification target {j} is not categorical")
            if t == REGRESSION and kind == CATEGORICAL:
                raise ContractError(f"regression target {j} is categorical")
            if self.mode == FORECAST and kind != LONGITUDINAL:
                raise ContractError(f"forecast target {j} is not longitudinal")


@dataclass
class GcnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def names(self) -> list:
        return [f.name for f in fields(self)]

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.names}

    def copy(self) -> "GcnParams":
        return GcnParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "GcnParams":
        return GcnParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    @property
    def shape(self) -> tuple:
        """``(k1, hidden, k2, n_targets)``."""
        return self.w1.shape[0], self.w1.shape[1], self.w_out.shape[2], self.w_out.shape[0]


def init_params(k1: int, k2: int, n_targets: int, hidden: int, rng: np.random.Generator) -> GcnParams:
    """Uniform ``±sqrt(6 / (fan_in + fan_out))`` weights, zero biases."""

    def glorot(*shape):
        fan_in, fan_out = shape[-2], shape[-1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    return GcnParams(
        w1=glorot(k1, hidden),
        b1=np.zeros(hidden),
        w2=glorot(hidden, hidden),
        b2=np.zeros(hidden),
        w_out=glorot(n_targets, hidden, k2),
        b_out=np.zeros((n_targets, k2)),
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = LEARNING_RATE[REGRESSION]
    max_epochs: int = 50
    v_stop: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = HIDDEN
    batch_size: int | None = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 0 or self.v_stop < 1 or self.hidden < 1:
            raise ConfigError("need max_epochs >= 0, v_stop >= 1, hidden >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam constants")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @classmethod
    def for_task(cls, task: TaskSpec, **kwargs) -> "TrainConfig":
        kwargs.setdefault("learning_rate", LEARNING_RATE[REGRESSION if task.name == "mixed" else task.name])
        return cls(**kwargs)


@dataclass
class AdamState:
    step: int
    m: GcnParams
    v: GcnParams

    @classmethod
    def zeros(cls, params: GcnParams) -> "AdamState":
        return cls(0, params.zeros_like(), params.zeros_like())


@dataclass
class TrainedModel:
    params: GcnParams
    a_norm: np.ndarray
    task: TaskSpec
    k1: int
    k2: int
    feature_names: tuple
    mean: np.ndarray
    sd: np.ndarray
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    train_ids: tuple = ()
    val_ids: tuple = ()
    config: TrainConfig = field(default_factory=TrainConfig)


# ---------------------------------------------------------------------------
# Data layout
# ---------------------------------------------------------------------------


def forecast_split_sizes(k_gcn: int, r_f: float) -> tuple:
    k2 = int(math.floor(r_f * k_gcn + 0.5))
    k1 = k_gcn - k2
    if k1 < 1 or k2 < 1:
        raise ConfigError(f"forecast split of k_gcn={k_gcn} with r_f={r_f} leaves an empty block")
    return k1, k2


def split_history_horizon(x_gcn, r_f: float | None = None, mode: str = FORECAST):
    """Split the coefficient axis into history and horizon blocks.

    B-spline coefficients are ordered in time, so the last ``k2`` slots
    cover the end of the domain. In static mode both blocks are the whole
    tensor.

    Returns
    -------
    k1, k2, history, horizon
    """
    data = x_gcn.data if isinstance(x_gcn, EmbeddedTensor) else np.asarray(x_gcn)
    k = data.shape[-1]
    if mode == STATIC:
        return k, k, data, data
    if mode != FORECAST:
        raise ConfigError(f"unknown mode {mode!r}")
    if r_f is None or not 0 < r_f < 1:
        raise ConfigError("forecast ratio must lie in (0, 1)")
    k1, k2 = forecast_split_sizes(k, r_f)
    return k1, k2, data[..., :k1], data[..., k1:]


def network_io(data: np.ndarray, task: TaskSpec):
    """Inputs ``(n, p, k1)`` and truths ``(n, n_targets, k2)``.

    In static mode the target rows of the input are zeroed (the standardized
    mean) so the network cannot read its own answer; in forecast mode the
    history of every feature, targets included, is visible.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        data = data[None]
    idx = task.indices
    if task.mode == STATIC:
        x = data.copy()
        x[:, idx, :] = 0.0
        return x, data[:, idx, :]
    k1, _, hist, horizon = split_history_horizon(data, task.r_f, FORECAST)
    return np.ascontiguousarray(hist), horizon[:, idx, :]


def mask_inputs(x: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Network inputs for entities whose targets are unknown."""
    x = np.array(x, dtype=float)
    if task.mode == STATIC:
        x[..., task.indices, :] = 0.0
        return x
    k1, _ = forecast_split_sizes(x.shape[-1], task.r_f)
    return x[..., :k1]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_shapes(params: GcnParams, a_norm, x, task):
    k1, hidden, k2, n_t = params.shape
    p = a_norm.shape[0]
    if a_norm.shape != (p, p):
        raise ContractError("adjacency must be square")
    if x.shape[-2:] != (p, k1):
        raise ContractError(f"input of shape {x.shape[-2:]} does not match (p={p}, k1={k1})")
    if len(task.targets) != n_t:
        raise ContractError("number of output heads differs from the number of targets")
    if params.w2.shape != (hidden, hidden) or params.b_out.shape != (n_t, k2):
        raise ContractError("inconsistent parameter shapes")


def _forward_cache(params: GcnParams, a_norm, x, task):
    ax = np.einsum("ij,njk->nik", a_norm, x)
    z1 = ax @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    ah1 = np.einsum("ij,njk->nik", a_norm, h1)
    z2 = ah1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    ht = h2[:, task.indices, :]
    out = np.einsum("nth,thk->ntk", ht, params.w_out) + params.b_out
    return out, (ax, z1, h1, ah1, z2, h2, ht)


def forward(params: GcnParams, a_norm: np.ndarray, x: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Outputs ``(n_targets, k2)`` for one entity or ``(n, n_targets, k2)`` for a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    _check_shapes(params, a_norm, xb, task)
    out, _ = _forward_cache(params, a_norm, xb, task)
    return out[0] if single else out


def loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error over all targets and slots."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractError("prediction and truth differ in shape")
    return float(np.mean((pred - truth) ** 2))


def backward(params: GcnParams, a_norm, x, truth, task: TaskSpec, scale: float = 1.0):
    """Gradient of ``scale * sum_entities loss(entity)``.

    Returns
    -------
    grads : GcnParams
    total : float
        Sum of per-entity losses (unscaled).
    """
    x = np.asarray(x, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if x.ndim == 2:
        x, truth = x[None], truth[None]
    _check_shapes(params, a_norm, x, task)
    out, (ax, z1, h1, ah1, z2, h2, ht) = _forward_cache(params, a_norm, x, task)
    if out.shape != truth.shape:
        raise ContractError("truth shape does not match network output")
    diff = out - truth
    per_entity = diff[0].size
    total = float(np.sum(diff**2) / per_entity)
    d_out = (2.0 * scale / per_entity) * diff
    g_wout = np.einsum("nth,ntk->thk", ht, d_out)
    g_bout = d_out.sum(axis=0)
    d_h2 = np.zeros_like(h2)
    d_h2[:, task.indices, :] += np.einsum("ntk,thk->nth", d_out, params.w_out)
    d_z2 = d_h2 * (z2 > 0)
    g_w2 = np.einsum("nph,npk->hk", ah1, d_z2)
    g_b2 = d_z2.sum(axis=(0, 1))
    d_h1 = np.einsum("ji,njk->nik", a_norm, d_z2 @ params.w2.T)
    d_z1 = d_h1 * (z1 > 0)
    g_w1 = np.einsum("npk,nph->kh", ax, d_z1)
    g_b1 = d_z1.sum(axis=(0, 1))
    grads = GcnParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2, w_out=g_wout, b_out=g_bout)
    return grads, total


def adam_step(params: GcnParams, grads: GcnParams, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns new params and state."""
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.arrays().items():
        g = getattr(grads, name)
        m = b1 * getattr(state.m, name) + (1 - b1) * g
        v = b2 * getattr(state.v, name) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_p[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name], new_v[name] = m, v
    return GcnParams(**new_p), AdamState(step, GcnParams(**new_m), GcnParams(**new_v))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _validation_loss(params, a_norm, x, y, task) -> float:
    return loss(forward(params, a_norm, x, task), y)


def train_val_split(n: int, val_fraction: float, rng: np.random.Generator):
    n_val = int(math.floor(val_fraction * n))
    if n - n_val < 1 or n_val < 1:
        raise ConfigError(f"cannot split {n} entities with val_fraction={val_fraction}")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(
    x_gcn: EmbeddedTensor,
    graph: KnowledgeGraph,
    task: TaskSpec,
    config: TrainConfig = TrainConfig(),
    rows: Sequence[int] | None = None,
) -> TrainedModel:
    """Fit the network on ``rows`` of ``x_gcn`` (default: all entities).

    A ``val_fraction`` share of those rows is held out for early stopping.
    Entities are visited in a shuffled order and one Adam step is taken per
    ``batch_size`` entities (default 1). With ``batch_size=None`` the
    gradients of the whole epoch are summed into a single step.
    The parameters with the best validation loss are returned.
    """
    if graph.p != x_gcn.p:
        raise ContractError("graph and embedding have different numbers of features")
    if graph.feature_names and tuple(graph.feature_names) != tuple(x_gcn.feature_names):
        raise ContractError("graph and embedding feature sets differ")
    task.check(x_gcn.modalities)
    rows = np.arange(x_gcn.n) if rows is None else np.asarray(rows, dtype=int)
    if rows.size < 2:
        raise ContractError("need at least two training entities")
    rng = rng_for(config.seed, "train")
    tr_local, va_local = train_val_split(rows.size, config.val_fraction, rng)
    tr, va = rows[tr_local], rows[va_local]
    x_all, y_all = network_io(x_gcn.data, task)
    x_tr, y_tr, x_va, y_va = x_all[tr], y_all[tr], x_all[va], y_all[va]
    k1, k2 = x_all.shape[2], y_all.shape[2]
    a_norm = graph.a_norm
    params = init_params(k1, k2, len(task.targets), config.hidden, rng)
    state = AdamState.zeros(params)
    model = TrainedModel(
        params=params.copy(),
        a_norm=a_norm,
        task=task,
        k1=k1,
        k2=k2,
        feature_names=tuple(x_gcn.feature_names),
        mean=x_gcn.mean,
        sd=x_gcn.sd,
        train_ids=tuple(x_gcn.entity_ids[i] for i in tr),
        val_ids=tuple(x_gcn.entity_ids[i] for i in va),
        config=config,
    )
    best, stagnant = math.inf, 0
    batch = config.batch_size or tr.size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(tr.size) if config.batch_size else np.arange(tr.size)
        total = 0.0
        for start in range(0, tr.size, batch):
            sel = order[start:start + batch]
            grads, part = backward(params, a_norm, x_tr[sel], y_tr[sel], task)
            params, state = adam_step(params, grads, state, config)
            total += part
        train_loss = total / tr.size
        val_loss = _validation_loss(params, a_norm, x_va, y_va, task)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        model.train_loss.append(train_loss)
        model.val_loss.append(val_loss)
        model.stopped_epoch = epoch
        if val_loss < best:
            best, stagnant = val_loss, 0
            model.params, model.best_epoch = params.copy(), epoch
        else:
            stagnant += 1
            if stagnant >= config.v_stop:
                break
    return model


def predict(model: TrainedModel, x) -> np.ndarray:
    """Network output for standardized, masked inputs.

    ``x`` is either an EmbeddedTensor (checked against the model's
    standardization statistics and masked here) or an already prepared
    ``(p, k1)`` / ``(n, p, k1)`` input array.
    """
    if isinstance(x, EmbeddedTensor):
        if tuple(x.feature_names) != tuple(model.feature_names):
            raise ContractError("embedding features differ from the model's")
        if x.mean.shape != model.mean.shape or not (
            np.array_equal(x.mean, model.mean) and np.array_equal(x.sd, model.sd)
        ):
            raise ContractError("embedding statistics differ from the model's")
        x = mask_inputs(x.data, model.task)
    return forward(model.params, model.a_norm, x, model.task)


def with_params(model: TrainedModel, params: GcnParams) -> TrainedModel:
    return replace(model, params=params)
