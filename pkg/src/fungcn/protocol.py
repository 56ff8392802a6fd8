"""Train/test evaluation protocol for one target and one seed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import CATEGORICAL, GCN, GRAPH, K_GCN, K_GRAPH, LONGITUDINAL, Dataset, assemble
from .errors import ConfigError
from .evaluate import accuracy, decode, majority_rate, per_entity_mean_curves, std_rmse_details, truth_curves
from .gcn import CLASSIFICATION, FORECAST, REGRESSION, STATIC, TaskSpec, TrainConfig, train
from .graph import THETA_SYNTHETIC, SolverConfig, estimate_graph
from .seeds import rng_for

TASKS = (REGRESSION, CLASSIFICATION, FORECAST)


@dataclass(frozen=True)
class MetricRow:
    task: str
    target: str
    seed: int
    metric: str
    value: float


@dataclass(frozen=True)
class ProtocolConfig:
    train_fraction: float = 0.75
    k_graph: int = K_GRAPH
    theta: float = THETA_SYNTHETIC
    r_f: float = 0.3
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def split_rows(n: int, train_fraction: float, seed: int):
    n_train = int(math.floor(train_fraction * n + 0.5))
    if n_train < 3 or n_train >= n:
        raise ConfigError(f"cannot split {n} entities with train_fraction={train_fraction}")
    perm = rng_for(seed, "split").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def task_for(dataset: Dataset, target: str, task: str, r_f: float) -> TaskSpec:
    j = dataset.index(target)
    if task == FORECAST:
        return TaskSpec(((j, REGRESSION),), FORECAST, r_f)
    if task not in (REGRESSION, CLASSIFICATION):
        raise ConfigError(f"unknown task {task!r}")
    return TaskSpec(((j, task),), STATIC)


def run_replication(
    dataset: Dataset,
    target: str,
    task: str,
    seed: int,
    config: ProtocolConfig = ProtocolConfig(),
) -> list:
    """Estimate the graph and train on a training split, score the test split.

    Both the graph embedding and the network's standardization use training
    entities only.
    """
    spec = task_for(dataset, target, task, config.r_f)
    train_rows, test_rows = split_rows(dataset.n, config.train_fraction, seed)
    x_graph = assemble(dataset.subset(train_rows), GRAPH, config.k_graph, seed)
    graph = estimate_graph(x_graph, config.solver, config.theta)
    x_gcn = assemble(dataset, GCN, K_GCN[task], seed).restandardize(train_rows)
    tcfg = TrainConfig.for_task(spec, seed=seed, **config.train)
    model = train(x_gcn, graph, spec, tcfg, rows=train_rows)
    (pred,) = decode(model, x_gcn, test_rows)
    rows = [MetricRow(task, target, seed, "best_epoch", float(model.best_epoch))]
    kind = dataset.feature(target).modality.kind
    if kind == LONGITUDINAL:
        truth = truth_curves(x_gcn, target, test_rows)
        value, skipped = std_rmse_details(truth, pred.values)
        base, _ = std_rmse_details(truth, per_entity_mean_curves(truth))
        rows += [
            MetricRow(task, target, seed, "std_rmse", value),
            MetricRow(task, target, seed, "baseline_std_rmse", base),
            MetricRow(task, target, seed, "skipped", float(skipped)),
        ]
    elif kind == CATEGORICAL:
        truth = np.asarray(dataset.feature(target).values, dtype=int)[test_rows]
        rows += [
            MetricRow(task, target, seed, "accuracy", accuracy(truth, pred.values)),
            MetricRow(task, target, seed, "majority_rate", majority_rate(truth)),
        ]
    else:
        truth = np.asarray(dataset.feature(target).values, dtype=float)[test_rows]
        rmse = float(np.sqrt(np.mean((truth - np.asarray(pred.values)) ** 2)))
        rows.append(MetricRow(task, target, seed, "rmse", rmse))
    return rows


def run_protocol(
    datasets,
    targets: Sequence[tuple],
    seeds: Sequence[int],
    config: ProtocolConfig = ProtocolConfig(),
) -> list:
    """Rows for every ``(target, task)`` pair and seed.

    ``datasets`` maps a seed to its Dataset (a callable or a fixed Dataset).
    """
    out = []
    for seed in seeds:
        ds = datasets(seed) if callable(datasets) else datasets
        for target, task in targets:
            out.extend(run_replication(ds, target, task, seed, config))
    return out
