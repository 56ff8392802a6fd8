"""Files: long-format datasets, JSON containers, DOT graphs and metric CSVs.

Containers are JSON objects with ``format``, ``kind`` and ``version`` keys;
loading anything with another version fails loudly. Floats are written with
``repr`` precision so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .embedding import CATEGORICAL, LONGITUDINAL, SCALAR, CategoryCodebook, Dataset, EmbeddedTensor, Feature, Modality
from .errors import ContractError, IngestionError
from .fda import BSplineBasis, Curve, DiscreteSamples, Domain, FpcBasis, make_bspline_basis, quadrature
from .gcn import GcnParams, TaskSpec, TrainConfig, TrainedModel
from .graph import KnowledgeGraph, SelectionPath
from .seeds import SCHEME

FORMAT = "fungcn"
VERSION = 1
CSV_COLUMNS = ("entity_id", "feature", "time", "value")
METRIC_COLUMNS = ("task", "target", "seed", "metric", "value")


def _num(x: float) -> str:
    return repr(float(x))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    return sha256_bytes(canonical_json(config).encode())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def schema_of(dataset: Dataset) -> dict:
    feats = []
    for f in dataset.features:
        entry = {"name": f.name, "modality": f.modality.kind}
        if f.modality.kind == CATEGORICAL:
            entry["labels"] = list(f.modality.labels)
        feats.append(entry)
    return {"domain": [dataset.domain.t_min, dataset.domain.t_max], "features": feats}


def dataset_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for f in dataset.features:
        kind = f.modality.kind
        for eid, v in zip(dataset.entity_ids, f.values):
            if kind == LONGITUDINAL:
                for t, y in zip(v.times, v.values):
                    writer.writerow((eid, f.name, _num(t), _num(y)))
            elif kind == CATEGORICAL:
                writer.writerow((eid, f.name, "", f.modality.labels[int(v)]))
            else:
                writer.writerow((eid, f.name, "", _num(v)))
    return buf.getvalue()


def dataset_hash(dataset: Dataset) -> str:
    payload = dataset_csv(dataset) + canonical_json(schema_of(dataset))
    return sha256_bytes(payload.encode())


def write_dataset(dataset: Dataset, csv_path, manifest: dict | None = None) -> Path:
    """Write ``<name>.csv`` plus a ``<name>.json`` schema/manifest next to it."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(dataset_csv(dataset))
    meta = {"format": FORMAT, "kind": "dataset", "version": VERSION, "schema": schema_of(dataset)}
    meta["manifest"] = dict(manifest or {}, seed_scheme=SCHEME, dataset_hash=dataset_hash(dataset))
    schema_path = csv_path.with_suffix(".json")
    schema_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return schema_path


def _parse_float(text, where):
    try:
        value = float(text)
    except ValueError:
        raise IngestionError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise IngestionError(f"{where}: non-finite value")
    return value


def read_dataset(csv_path, schema=None) -> Dataset:
    """Parse a long-format CSV.

    ``schema`` is a dict or a path; by default the ``.json`` file next to
    the CSV is used. Entities appear in order of first occurrence.
    """
    csv_path = Path(csv_path)
    if schema is None:
        schema = csv_path.with_suffix(".json")
    if not isinstance(schema, dict):
        schema = load_json(schema)
    schema = schema.get("schema", schema)
    try:
        domain = Domain(*schema["domain"])
        specs = OrderedDict((f["name"], f) for f in schema["features"])
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"malformed schema: {exc}") from None
    entities: OrderedDict = OrderedDict()
    cells: dict = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise IngestionError(f"expected columns {CSV_COLUMNS}, got {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise IngestionError(f"line {line}: expected 4 fields")
            eid, name, t, value = row
            if name not in specs:
                raise IngestionError(f"line {line}: unknown feature {name!r}")
            entities.setdefault(eid, None)
            cells.setdefault((eid, name), []).append((t, value, line))
    features = []
    for name, spec in specs.items():
        kind = spec["modality"]
        if kind == CATEGORICAL:
            modality = Modality.categorical(len(spec["labels"]), spec["labels"])
            lookup = {lab: i for i, lab in enumerate(modality.labels)}
        elif kind in (LONGITUDINAL, SCALAR):
            modality = Modality(kind)
        else:
            raise IngestionError(f"feature {name!r}: unknown modality {kind!r}")
        values = []
        for eid in entities:
            rows = cells.get((eid, name))
            if not rows:
                raise IngestionError(f"missing value for entity {eid!r}, feature {name!r}")
            where = f"entity {eid!r}, feature {name!r}"
            if kind == LONGITUDINAL:
                pts = sorted((_parse_float(t, where), _parse_float(v, where)) for t, v, _ in rows)
                times = np.array([p[0] for p in pts])
                if np.any(np.diff(times) <= 0):
                    raise IngestionError(f"{where}: repeated sample times")
                try:
                    values.append(DiscreteSamples(times, np.array([p[1] for p in pts])))
                except ContractError as exc:
                    raise IngestionError(f"{where}: {exc}") from None
            else:
                if len(rows) != 1 or rows[0][0] != "":
                    raise IngestionError(f"{where}: expected a single row without time")
                if kind == CATEGORICAL:
                    if rows[0][1] not in lookup:
                        raise IngestionError(f"{where}: unknown level {rows[0][1]!r}")
                    values.append(lookup[rows[0][1]])
                else:
                    values.append(_parse_float(rows[0][1], where))
        features.append(Feature(name, modality, values))
    try:
        return Dataset(list(entities), features, domain)
    except ContractError as exc:
        raise IngestionError(str(exc)) from None


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def save_json(obj: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, allow_nan=False) + "\n")
    return path


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: invalid JSON ({exc})") from None


def _container(kind: str, body: dict) -> dict:
    return {"format": FORMAT, "kind": kind, "version": VERSION, **body}


def _open(obj: dict, kind: str) -> dict:
    if obj.get("format") != FORMAT or obj.get("kind") != kind:
        raise IngestionError(f"not a {FORMAT} {kind} container")
    if obj.get("version") != VERSION:
        raise IngestionError(f"unsupported {kind} container version {obj.get('version')!r}")
    return obj


def _basis_dict(basis: BSplineBasis) -> dict:
    return {"k": basis.k, "domain": [basis.domain.t_min, basis.domain.t_max]}


def _basis_from(d: dict) -> BSplineBasis:
    return make_bspline_basis(d["k"], Domain(*d["domain"]))


def _fpc_dict(fpc: FpcBasis) -> dict:
    return {
        "basis": _basis_dict(fpc.mean_curve.basis),
        "mean": _arr(fpc.mean_curve.coeffs),
        "components": _arr(fpc.component_coeffs),
        "eigenvalues": _arr(fpc.eigenvalues),
        "total_variance": float(fpc.total_variance),
    }


def _fpc_from(d: dict) -> FpcBasis:
    basis = _basis_from(d["basis"])
    grid, _ = quadrature(basis.domain)
    return FpcBasis(
        Curve(basis, d["mean"]),
        [Curve(basis, c) for c in d["components"]],
        np.asarray(d["eigenvalues"], dtype=float),
        grid,
        float(d["total_variance"]),
    )


def tensor_to_dict(x: EmbeddedTensor) -> dict:
    bases = {}
    for name, b in x.bases.items():
        bases[name] = {"type": "bspline", **_basis_dict(b)} if isinstance(b, BSplineBasis) else {"type": "fpc", **_fpc_dict(b)}
    return _container("tensor", {
        "embedding": x.kind,
        "k": x.k,
        "seed": x.seed,
        "entity_ids": list(x.entity_ids),
        "features": [
            {"name": n, "modality": m.kind, **({"labels": list(m.labels)} if m.kind == CATEGORICAL else {})}
            for n, m in zip(x.feature_names, x.modalities)
        ],
        "data": _arr(x.data),
        "mean": _arr(x.mean),
        "sd": _arr(x.sd),
        "codebooks": {n: {"seed": b.seed, "vectors": _arr(b.vectors)} for n, b in x.codebooks.items()},
        "bases": bases,
    })


def tensor_from_dict(obj: dict) -> EmbeddedTensor:
    obj = _open(obj, "tensor")
    mods = []
    for f in obj["features"]:
        mods.append(Modality.categorical(len(f["labels"]), f["labels"]) if f["modality"] == CATEGORICAL else Modality(f["modality"]))
    books = {}
    for n, b in obj["codebooks"].items():
        vec = np.asarray(b["vectors"], dtype=float)
        vec.setflags(write=False)
        books[n] = CategoryCodebook(n, vec, int(b["seed"]))
    bases = {n: _basis_from(b) if b["type"] == "bspline" else _fpc_from(b) for n, b in obj["bases"].items()}
    return EmbeddedTensor(
        data=np.asarray(obj["data"], dtype=float),
        kind=obj["embedding"],
        k=int(obj["k"]),
        mean=np.asarray(obj["mean"], dtype=float),
        sd=np.asarray(obj["sd"], dtype=float),
        feature_names=tuple(f["name"] for f in obj["features"]),
        modalities=tuple(mods),
        entity_ids=tuple(obj["entity_ids"]),
        codebooks=books,
        bases=bases,
        seed=int(obj["seed"]),
    )


def graph_to_dict(g: KnowledgeGraph) -> dict:
    return _container("graph", {
        "theta": g.theta,
        "feature_names": list(g.feature_names),
        "a_raw": _arr(g.a_raw),
        "a_sym": _arr(g.a_sym),
        "a_norm": _arr(g.a_norm),
        "paths": [{"target": p.target, "selections": [[t, c] for t, c in p.selections]} for p in g.paths],
    })


def graph_from_dict(obj: dict) -> KnowledgeGraph:
    obj = _open(obj, "graph")
    return KnowledgeGraph(
        np.asarray(obj["a_raw"], dtype=float),
        np.asarray(obj["a_sym"], dtype=float),
        np.asarray(obj["a_norm"], dtype=float),
        float(obj["theta"]),
        tuple(SelectionPath(p["target"], tuple(map(tuple, p["selections"]))) for p in obj["paths"]),
        tuple(obj["feature_names"]),
    )


def graph_hash(g: KnowledgeGraph) -> str:
    return sha256_bytes(canonical_json(graph_to_dict(g)).encode())


def graph_dot(g: KnowledgeGraph, modalities=None) -> str:
    """Undirected DOT graph; ``penwidth`` and ``weight`` carry the pruned weight."""
    names = list(g.feature_names) or [f"f{i}" for i in range(g.p)]
    lines = ["graph knowledge {"]
    for i, name in enumerate(names):
        kind = modalities[i].kind if modalities is not None else ""
        label = f"{name}\\n({kind})" if kind else name
        lines.append(f'  "{name}" [label="{label}", modality="{kind}"];')
    for i, j, w in g.edges():
        lines.append(f'  "{names[i]}" -- "{names[j]}" [weight={_num(w)}, penwidth={_num(w)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def model_to_dict(m: TrainedModel, graph: KnowledgeGraph | None = None) -> dict:
    cfg = {k: getattr(m.config, k) for k in m.config.__dataclass_fields__}
    return _container("model", {
        "params": {k: _arr(v) for k, v in m.params.arrays().items()},
        "a_norm": _arr(m.a_norm),
        "task": {"targets": [list(t) for t in m.task.targets], "mode": m.task.mode, "r_f": m.task.r_f},
        "k1": m.k1,
        "k2": m.k2,
        "feature_names": list(m.feature_names),
        "mean": _arr(m.mean),
        "sd": _arr(m.sd),
        "train_loss": list(m.train_loss),
        "val_loss": list(m.val_loss),
        "stopped_epoch": m.stopped_epoch,
        "best_epoch": m.best_epoch,
        "train_ids": list(m.train_ids),
        "val_ids": list(m.val_ids),
        "config": cfg,
        "graph_hash": graph_hash(graph) if graph is not None else None,
    })


def model_from_dict(obj: dict) -> TrainedModel:
    obj = _open(obj, "model")
    params = GcnParams(**{k: np.asarray(v, dtype=float) for k, v in obj["params"].items()})
    task = obj["task"]
    return TrainedModel(
        params=params,
        a_norm=np.asarray(obj["a_norm"], dtype=float),
        task=TaskSpec(tuple(map(tuple, task["targets"])), task["mode"], task["r_f"]),
        k1=int(obj["k1"]),
        k2=int(obj["k2"]),
        feature_names=tuple(obj["feature_names"]),
        mean=np.asarray(obj["mean"], dtype=float),
        sd=np.asarray(obj["sd"], dtype=float),
        train_loss=list(obj["train_loss"]),
        val_loss=list(obj["val_loss"]),
        stopped_epoch=int(obj["stopped_epoch"]),
        best_epoch=int(obj["best_epoch"]),
        train_ids=tuple(obj["train_ids"]),
        val_ids=tuple(obj["val_ids"]),
        config=TrainConfig(**obj["config"]),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow((r.task, r.target, int(r.seed), r.metric, _num(r.value)))
    return buf.getvalue()


def write_metrics(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(rows))
    return path
