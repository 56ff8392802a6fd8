"""Command-line front end.

Every subcommand reads a flat JSON config (``--config``), applies
``--override key=value`` pairs on top and rejects unknown keys. Outputs go
to ``--out`` together with a ``manifest.json`` recording the resolved
config, its hash and the seed scheme.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .embedding import CATEGORICAL, GCN, GRAPH, K_GCN, K_GRAPH, K_SMOOTH, LONGITUDINAL, Dataset, assemble, embed_longitudinal_gcn
from .errors import ConfigError, ContractError, EmbeddingError, FunGCNError, NumericalError
from .evaluate import accuracy, decode, std_rmse_details
from .fda import Curve, QUAD_POINTS, quadrature
from .gcn import CLASSIFICATION, FORECAST, REGRESSION, STATIC, TaskSpec, TrainConfig, train
from .graph import SolverConfig, THETA_SYNTHETIC, estimate_graph
from .protocol import MetricRow, ProtocolConfig, run_protocol, split_rows
from .seeds import SCHEME
from .synth import ScenarioConfig, generate_scenario

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERICAL = 0, 2, 3

_SCENARIO_KEYS = {
    "n": int, "p": int, "proportions": list, "p_0": int, "grid_size": int, "eta2": float,
    "length_scale": float, "nu": float, "noise_cov_floor": float, "weight_range": list,
    "noise_scale": float, "filter_sigma": float, "category_counts": list,
}
_SOLVER_KEYS = {"p_max": int, "path_length": int, "c_min": float, "tolerance": float, "max_iters": int, "refine_depth": int}
_TRAIN_KEYS = {
    "learning_rate": float, "max_epochs": int, "v_stop": int, "val_fraction": float, "beta1": float,
    "beta2": float, "eps": float, "hidden": int, "batch_size": (int, type(None)),
}

KEYS = {
    "simulate": dict(_SCENARIO_KEYS),
    "embed": {"dataset": "path", "k_graph": int, "k_gcn": int, "k_smooth": int, "task": str},
    "graph": {"x_graph": "path", "theta": float, "n_jobs": int, **_SOLVER_KEYS},
    "train": {
        "x_gcn": "path", "graph": "path", "target": str, "task": str, "r_f": float,
        "train_fraction": float, **_TRAIN_KEYS,
    },
    "predict": {"model": "path", "x_gcn": "path", "entities": list},
    "evaluate": {
        "predictions": "path", "dataset": "path", "task": str, "k_gcn": int,
        "targets": list, "seeds": list, "train_fraction": float, "k_graph": int, "theta": float,
        "r_f": float, **_SOLVER_KEYS, **_TRAIN_KEYS,
        **{f"scenario.{k}": v for k, v in _SCENARIO_KEYS.items()},
    },
}
REQUIRED = {
    "embed": ("dataset",),
    "graph": ("x_graph",),
    "train": ("x_gcn", "graph", "target"),
    "predict": ("model", "x_gcn"),
    "evaluate": (),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_override(text: str) -> tuple:
    """``key=value`` with the value read as JSON, falling back to a string."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def _check_type(key, value, expected):
    if expected == "path":
        if not isinstance(value, str) or not Path(value).exists():
            raise ConfigError(f"{key}: file not found: {value!r}")
        return value
    types = expected if isinstance(expected, tuple) else (expected,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if list in types and isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, types) or (isinstance(value, bool) and bool not in types):
        raise ConfigError(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got {value!r}")
    return value


def resolve_config(command: str, config_path=None, overrides=(), seed=None) -> dict:
    """Merge the config file and overrides, then validate keys, types and paths."""
    cfg = {}
    if config_path is not None:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    for text in overrides:
        key, value = parse_override(text)
        cfg[key] = value
    seed = cfg.pop("seed", 0) if seed is None else seed
    cfg.pop("seed", None)
    allowed = KEYS[command]
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    missing = [k for k in REQUIRED.get(command, ()) if k not in cfg]
    if missing:
        raise ConfigError(f"missing config keys for {command}: {', '.join(missing)}")
    out = {k: _check_type(k, v, allowed[k]) for k, v in sorted(cfg.items())}
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    out["seed"] = seed
    return out


def _pick(cfg: dict, keys, prefix: str = "") -> dict:
    out = {}
    for k in keys:
        if prefix + k in cfg:
            v = cfg[prefix + k]
            out[k] = tuple(v) if isinstance(v, list) else v
    return out


def _write_manifest(out: Path, command: str, cfg: dict, inputs=None):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": io.config_hash(cfg),
        "seed": cfg["seed"],
        "seed_scheme": SCHEME,
        "inputs": {k: io.sha256_bytes(Path(p).read_bytes()) for k, p in sorted((inputs or {}).items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_dataset(path) -> Dataset:
    return io.read_dataset(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> str:
    scenario = ScenarioConfig(seed=cfg["seed"], **_pick(cfg, _SCENARIO_KEYS))
    dataset = generate_scenario(scenario)
    manifest = {"seed": cfg["seed"], "config": cfg, "config_hash": io.config_hash(cfg)}
    io.write_dataset(dataset, out / "dataset.csv", manifest)
    return f"dataset: {dataset.n} entities x {dataset.p} features -> {out / 'dataset.csv'}"


def cmd_embed(cfg: dict, out: Path) -> str:
    dataset = _load_dataset(cfg["dataset"])
    k_smooth = cfg.get("k_smooth", K_SMOOTH)
    task = cfg.get("task", REGRESSION)
    if task not in K_GCN:
        raise ConfigError(f"unknown task {task!r}")
    k_graph, k_gcn = cfg.get("k_graph", K_GRAPH), cfg.get("k_gcn", K_GCN[task])
    failures = {}
    tensors = {}
    for kind, k in ((GRAPH, k_graph), (GCN, k_gcn)):
        try:
            tensors[kind] = assemble(dataset, kind, k, cfg["seed"], k_smooth)
        except EmbeddingError as exc:
            failures.update({f"{kind}:{name}": err for name, err in exc.failures.items()})
    if failures:
        raise EmbeddingError(failures)
    lines = []
    for kind, x in tensors.items():
        path = io.save_json(io.tensor_to_dict(x), out / f"x_{kind}.json")
        lines.append(f"x_{kind}: {x.n} x {x.p} x {x.k} -> {path}")
    _write_manifest(out, "embed", cfg, {"dataset": cfg["dataset"]})
    return "\n".join(lines)


def cmd_graph(cfg: dict, out: Path) -> str:
    x = io.tensor_from_dict(io.load_json(cfg["x_graph"]))
    solver = SolverConfig(**_pick(cfg, _SOLVER_KEYS))
    graph = estimate_graph(x, solver, cfg.get("theta", THETA_SYNTHETIC), n_jobs=cfg.get("n_jobs", 1))
    io.save_json(io.graph_to_dict(graph), out / "graph.json")
    (out / "graph.dot").write_text(io.graph_dot(graph, x.modalities))
    _write_manifest(out, "graph", cfg, {"x_graph": cfg["x_graph"]})
    return f"graph: {graph.p} nodes, {len(graph.edges())} edges -> {out / 'graph.json'}"


def _train_rows(n: int, cfg: dict):
    frac = cfg.get("train_fraction", 0.75)
    if frac == 1.0:
        return np.arange(n)
    rows, _ = split_rows(n, frac, cfg["seed"])
    return rows


def cmd_train(cfg: dict, out: Path) -> str:
    x = io.tensor_from_dict(io.load_json(cfg["x_gcn"]))
    graph = io.graph_from_dict(io.load_json(cfg["graph"]))
    if x.kind != GCN:
        raise ContractError("train needs a gcn embedding")
    targets = [t.strip() for t in cfg["target"].split(",")]
    task = cfg.get("task", REGRESSION)
    if task not in K_GCN:
        raise ConfigError(f"unknown task {task!r}")
    names = list(x.feature_names)
    for t in targets:
        if t not in names:
            raise ContractError(f"unknown target feature {t!r}")
    spec = task_for_names(names, targets, task, cfg.get("r_f", 0.3))
    rows = _train_rows(x.n, cfg)
    x = x.restandardize(rows)
    tcfg = TrainConfig.for_task(spec, seed=cfg["seed"], **_pick(cfg, _TRAIN_KEYS))
    model = train(x, graph, spec, tcfg, rows=rows)
    io.save_json(io.model_to_dict(model, graph), out / "model.json")
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("epoch", "train_loss", "val_loss"))
    for epoch, (a, b) in enumerate(zip(model.train_loss, model.val_loss), start=1):
        writer.writerow((epoch, repr(float(a)), repr(float(b))))
    (out / "losses.csv").write_text(buf.getvalue())
    _write_manifest(out, "train", cfg, {"x_gcn": cfg["x_gcn"], "graph": cfg["graph"]})
    return f"model: best epoch {model.best_epoch}, stopped at {model.stopped_epoch} -> {out / 'model.json'}"


def task_for_names(names, targets, task, r_f):
    """TaskSpec for named targets sharing one task."""
    idx = [names.index(t) for t in targets]
    if task == FORECAST:
        return TaskSpec(tuple((j, REGRESSION) for j in idx), FORECAST, r_f)
    return TaskSpec(tuple((j, task) for j in idx), STATIC)


def predictions_csv(preds, entity_ids) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(io.CSV_COLUMNS)
    for pred, modality in preds:
        for eid, v in zip(entity_ids, pred.values):
            if pred.kind == LONGITUDINAL:
                grid, _ = quadrature(v.domain, QUAD_POINTS)
                for t, y in zip(grid, v(grid)):
                    writer.writerow((eid, pred.feature, repr(float(t)), repr(float(y))))
            elif pred.kind == CATEGORICAL:
                writer.writerow((eid, pred.feature, "", modality.labels[int(v)]))
            else:
                writer.writerow((eid, pred.feature, "", repr(float(v))))
    return buf.getvalue()


def cmd_predict(cfg: dict, out: Path) -> str:
    model = io.model_from_dict(io.load_json(cfg["model"]))
    x = io.tensor_from_dict(io.load_json(cfg["x_gcn"]))
    if tuple(x.feature_names) != tuple(model.feature_names):
        raise ContractError("model and embedding feature sets differ")
    if x.mean.shape != model.mean.shape:
        raise ContractError("model and embedding have different basis sizes")
    x = replace(x, data=(x.raw() - model.mean) / model.sd, mean=model.mean, sd=model.sd)
    ids = [str(e) for e in x.entity_ids]
    if "entities" in cfg:
        wanted = [str(e) for e in cfg["entities"]]
        unknown = sorted(set(wanted) - set(ids))
        if unknown:
            raise ContractError(f"unknown entities: {', '.join(unknown[:5])}")
    else:
        seen = {str(e) for e in model.train_ids + model.val_ids}
        wanted = [e for e in ids if e not in seen]
    if not wanted:
        raise ContractError("no entities to predict")
    rows = [ids.index(e) for e in wanted]
    preds = decode(model, x, rows)
    mods = [x.modalities[x.index(p.feature)] for p in preds]
    (out / "predictions.csv").write_text(predictions_csv(list(zip(preds, mods)), wanted))
    _write_manifest(out, "predict", cfg, {"model": cfg["model"], "x_gcn": cfg["x_gcn"]})
    return f"predictions: {len(wanted)} entities x {len(preds)} targets -> {out / 'predictions.csv'}"


def score_predictions(dataset: Dataset, predicted: Dataset, task: str, seed: int, k_gcn: int) -> list:
    """Metric rows comparing a predictions dataset with the truth.

    Longitudinal values on both sides are smoothed on the same basis before
    the std-RMSE is taken.
    """
    index = {str(e): i for i, e in enumerate(dataset.entity_ids)}
    missing = [e for e in predicted.entity_ids if str(e) not in index]
    if missing:
        raise ContractError(f"predicted entities missing from the dataset: {', '.join(map(str, missing[:5]))}")
    truth = dataset.subset([index[str(e)] for e in predicted.entity_ids])
    rows = []
    for feat in predicted.features:
        name = feat.name
        if name not in dataset.feature_names:
            raise ContractError(f"predicted feature {name!r} is not in the dataset")
        kind = truth.feature(name).modality.kind
        if kind != feat.modality.kind:
            raise ContractError(f"feature {name!r} has modality {feat.modality.kind} but the dataset has {kind}")
        if kind == LONGITUDINAL:
            a, basis = embed_longitudinal_gcn(truth, name, k_gcn)
            b, _ = embed_longitudinal_gcn(predicted, name, k_gcn)
            value, skipped = std_rmse_details([Curve(basis, c) for c in a], [Curve(basis, c) for c in b])
            rows += [MetricRow(task, name, seed, "std_rmse", value), MetricRow(task, name, seed, "skipped", float(skipped))]
        elif kind == CATEGORICAL:
            t_labels = [truth.feature(name).modality.labels[v] for v in truth.feature(name).values]
            p_labels = [feat.modality.labels[v] for v in feat.values]
            hits = [a == b for a, b in zip(t_labels, p_labels)]
            rows.append(MetricRow(task, name, seed, "accuracy", accuracy(np.ones(len(hits), int), np.asarray(hits, int))))
        else:
            err = np.asarray(truth.feature(name).values, float) - np.asarray(feat.values, float)
            rows.append(MetricRow(task, name, seed, "rmse", float(np.sqrt(np.mean(err**2)))))
    return rows


def _parse_targets(items) -> list:
    out = []
    for item in items:
        name, sep, task = str(item).partition(":")
        if not sep or task not in (REGRESSION, CLASSIFICATION, FORECAST):
            raise ConfigError(f"target {item!r} must look like name:regression|classification|forecast")
        out.append((name, task))
    return out


def cmd_evaluate(cfg: dict, out: Path) -> str:
    seed = cfg["seed"]
    if "predictions" in cfg:
        if "dataset" not in cfg:
            raise ConfigError("scoring a predictions file needs 'dataset'")
        dataset = _load_dataset(cfg["dataset"])
        schema = io.load_json(Path(cfg["dataset"]).with_suffix(".json"))["schema"]
        names = _predicted_features(cfg["predictions"])
        schema = dict(schema, features=[f for f in schema["features"] if f["name"] in names])
        predicted = io.read_dataset(cfg["predictions"], schema)
        rows = score_predictions(dataset, predicted, cfg.get("task", "prediction"), seed, cfg.get("k_gcn", 20))
        inputs = {"dataset": cfg["dataset"], "predictions": cfg["predictions"]}
    else:
        if "targets" not in cfg:
            raise ConfigError("the replication runner needs 'targets'")
        targets = _parse_targets(cfg["targets"])
        seeds = [int(s) for s in cfg.get("seeds", [seed])]
        pcfg = ProtocolConfig(
            train_fraction=cfg.get("train_fraction", 0.75),
            k_graph=cfg.get("k_graph", K_GRAPH),
            theta=cfg.get("theta", THETA_SYNTHETIC),
            r_f=cfg.get("r_f", 0.3),
            solver=SolverConfig(**_pick(cfg, _SOLVER_KEYS)),
            train=_pick(cfg, _TRAIN_KEYS),
        )
        if "dataset" in cfg:
            datasets = _load_dataset(cfg["dataset"])
            inputs = {"dataset": cfg["dataset"]}
        else:
            scenario = _pick(cfg, _SCENARIO_KEYS, "scenario.")
            datasets = lambda s: generate_scenario(ScenarioConfig(seed=s, **scenario))  # noqa: E731
            inputs = {}
        rows = run_protocol(datasets, targets, seeds, pcfg)
    io.write_metrics(rows, out / "metrics.csv")
    _write_manifest(out, "evaluate", cfg, inputs)
    return f"metrics: {len(rows)} rows -> {out / 'metrics.csv'}"


def _predicted_features(path) -> set:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return {row[1] for row in reader if len(row) > 1}


COMMANDS = {
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "graph": cmd_graph,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


HELP = {
    "simulate": "generate a synthetic scenario as a long-format CSV",
    "embed": "smooth and embed a dataset into graph and gcn tensors",
    "graph": "estimate the knowledge graph from a graph tensor",
    "train": "train the network on a gcn tensor and graph",
    "predict": "decode predictions for held-out entities",
    "evaluate": "score a predictions file or run the replication protocol",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fungcn", description="Functional GCN pipeline for multi-modal longitudinal data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON file with config keys")
        p.add_argument("--seed", type=int, help="top-level seed (default 0)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="set one config key")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, EmbeddingError):
        return EXIT_NUMERICAL if exc.numerical else EXIT_CONTRACT
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_CONTRACT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config, args.override, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        message = COMMANDS[args.command](cfg, out)
    except (FunGCNError, OSError) as exc:
        print(f"fungcn {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
