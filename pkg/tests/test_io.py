"""Tests for dataset files, JSON containers, DOT export and metric CSVs."""

import json

import numpy as np
import pytest

from fungcn import io
from fungcn.embedding import GCN, GRAPH, assemble
from fungcn.errors import IngestionError
from fungcn.gcn import REGRESSION, TaskSpec, TrainConfig, predict, train
from fungcn.graph import SolverConfig, estimate_graph
from fungcn.protocol import MetricRow
from fungcn.synth import ScenarioConfig, generate_scenario


@pytest.fixture(scope="module")
def dataset():
    return generate_scenario(ScenarioConfig(n=40, seed=3))


@pytest.fixture(scope="module")
def pipeline(dataset):
    x_graph = assemble(dataset, GRAPH, 3, seed=3)
    x_gcn = assemble(dataset, GCN, 5, seed=3)
    graph = estimate_graph(x_graph, SolverConfig(p_max=3))
    task = TaskSpec(((0, REGRESSION),))
    model = train(x_gcn, graph, task, TrainConfig(max_epochs=2, seed=3))
    return x_graph, x_gcn, graph, model


def write(path, text):
    path.write_text(text)
    return path


class TestDatasetFiles:
    def test_round_trip(self, dataset, tmp_path):
        io.write_dataset(dataset, tmp_path / "d.csv")
        back = io.read_dataset(tmp_path / "d.csv")
        assert back.entity_ids == list(dataset.entity_ids)
        assert back.feature_names == dataset.feature_names
        for a, b in zip(dataset.features, back.features):
            assert a.modality == b.modality
            if a.modality.kind == "longitudinal":
                for s, t in zip(a.values, b.values):
                    np.testing.assert_array_equal(s.times, t.times)
                    np.testing.assert_array_equal(s.values, t.values)
            else:
                assert list(a.values) == list(b.values)
        assert io.dataset_hash(back) == io.dataset_hash(dataset)

    def test_bytes_stable(self, dataset, tmp_path):
        io.write_dataset(dataset, tmp_path / "a.csv", {"seed": 3})
        io.write_dataset(dataset, tmp_path / "b.csv", {"seed": 3})
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_categories_written_as_labels(self, dataset, tmp_path):
        io.write_dataset(dataset, tmp_path / "d.csv")
        schema = json.loads((tmp_path / "d.json").read_text())["schema"]
        cat = next(f for f in schema["features"] if f["modality"] == "categorical")
        rows = [r for r in (tmp_path / "d.csv").read_text().splitlines() if f",{cat['name']}," in r]
        assert {r.split(",")[3] for r in rows} <= set(cat["labels"])
        assert all(r.split(",")[2] == "" for r in rows)

    def test_missing_value_names_entity_and_feature(self, dataset, tmp_path):
        io.write_dataset(dataset, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines(keepends=True)
        kept = [ln for ln in lines if not ln.startswith("e0007,iscal_0,")]
        write(tmp_path / "d.csv", "".join(kept))
        with pytest.raises(IngestionError, match="e0007.*iscal_0"):
            io.read_dataset(tmp_path / "d.csv")

    @pytest.mark.parametrize(
        "body,message",
        [
            ("id,feature,time,value\n", "columns"),
            ("entity_id,feature,time,value\na,zz,,1\n", "unknown feature"),
            ("entity_id,feature,time,value\na,s,,abc\n", "cannot parse"),
            ("entity_id,feature,time,value\na,s,0.5,1\n", "single row"),
            ("entity_id,feature,time,value\na,c,,blue\n", "unknown level"),
        ],
    )
    def test_malformed(self, tmp_path, body, message):
        schema = {"domain": [0, 1], "features": [{"name": "s", "modality": "scalar"}]}
        if ",c," in body:
            schema["features"] = [{"name": "c", "modality": "categorical", "labels": ["red", "green"]}]
        write(tmp_path / "d.csv", body)
        with pytest.raises(IngestionError, match=message):
            io.read_dataset(tmp_path / "d.csv", schema)

    def test_repeated_times(self, tmp_path):
        schema = {"domain": [0, 1], "features": [{"name": "x", "modality": "longitudinal"}]}
        write(tmp_path / "d.csv", "entity_id,feature,time,value\na,x,0.1,1\na,x,0.1,2\na,x,0.5,2\n")
        with pytest.raises(IngestionError, match="repeated"):
            io.read_dataset(tmp_path / "d.csv", schema)

    def test_entity_specific_times(self, tmp_path):
        schema = {"domain": [0, 1], "features": [{"name": "x", "modality": "longitudinal"}]}
        rows = ["entity_id,feature,time,value"]
        rows += [f"a,x,{t},{t}" for t in (0.0, 0.3, 0.4, 0.6, 0.8, 0.9)]
        rows += [f"b,x,{t},{t}" for t in (0.1, 0.2, 0.5, 0.7, 1.0)]
        write(tmp_path / "d.csv", "\n".join(rows) + "\n")
        ds = io.read_dataset(tmp_path / "d.csv", schema)
        assert [len(v.times) for v in ds.feature("x").values] == [6, 5]


class TestContainers:
    @pytest.mark.parametrize("which", [0, 1])
    def test_tensor_round_trip(self, pipeline, tmp_path, which):
        x = pipeline[which]
        io.save_json(io.tensor_to_dict(x), tmp_path / "x.json")
        back = io.tensor_from_dict(io.load_json(tmp_path / "x.json"))
        np.testing.assert_array_equal(back.data, x.data)
        np.testing.assert_array_equal(back.mean, x.mean)
        np.testing.assert_array_equal(back.sd, x.sd)
        assert back.feature_names == x.feature_names and back.modalities == x.modalities
        for name, book in x.codebooks.items():
            np.testing.assert_array_equal(back.codebooks[name].vectors, book.vectors)
        grid = np.linspace(0, 1, 7)
        for name, basis in x.bases.items():
            if which == 1:
                np.testing.assert_array_equal(back.bases[name](grid), basis(grid))
            else:
                np.testing.assert_array_equal(back.bases[name].component_coeffs, basis.component_coeffs)
                np.testing.assert_array_equal(back.bases[name].mean_curve.coeffs, basis.mean_curve.coeffs)

    def test_container_hash_stable(self, pipeline):
        a = io.canonical_json(io.tensor_to_dict(pipeline[1]))
        b = io.canonical_json(io.tensor_to_dict(pipeline[1]))
        assert io.sha256_bytes(a.encode()) == io.sha256_bytes(b.encode())

    def test_graph_round_trip(self, pipeline):
        graph = pipeline[2]
        back = io.graph_from_dict(json.loads(json.dumps(io.graph_to_dict(graph))))
        for name in ("a_raw", "a_sym", "a_norm"):
            np.testing.assert_array_equal(getattr(back, name), getattr(graph, name))
        assert back.paths == graph.paths and back.theta == graph.theta
        assert io.graph_hash(back) == io.graph_hash(graph)

    def test_model_round_trip(self, pipeline):
        _, x_gcn, graph, model = pipeline
        d = json.loads(json.dumps(io.model_to_dict(model, graph)))
        assert d["graph_hash"] == io.graph_hash(graph)
        back = io.model_from_dict(d)
        np.testing.assert_array_equal(predict(back, x_gcn), predict(model, x_gcn))
        assert back.task == model.task and back.config == model.config

    @pytest.mark.parametrize("patch", [{"version": 99}, {"kind": "graph"}, {"format": "other"}])
    def test_version_and_kind_checked(self, pipeline, patch):
        d = dict(io.tensor_to_dict(pipeline[1]), **patch)
        with pytest.raises(IngestionError):
            io.tensor_from_dict(d)

    def test_invalid_json(self, tmp_path):
        with pytest.raises(IngestionError):
            io.load_json(write(tmp_path / "x.json", "{nope"))


class TestDot:
    def test_structure(self, pipeline):
        x_graph, _, graph, _ = pipeline
        text = io.graph_dot(graph, x_graph.modalities)
        assert text.startswith("graph knowledge {")
        assert text.count(" -- ") == len(graph.edges())
        for i, j, w in graph.edges():
            assert f'"{graph.feature_names[i]}" -- "{graph.feature_names[j]}" [weight={w!r}, penwidth={w!r}]' in text

    def test_parses_with_pydot(self, pipeline):
        pydot = pytest.importorskip("pydot")
        x_graph, _, graph, _ = pipeline
        (parsed,) = pydot.graph_from_dot_data(io.graph_dot(graph, x_graph.modalities))
        assert len(parsed.get_nodes()) == graph.p
        widths = sorted(float(e.get("penwidth")) for e in parsed.get_edges())
        assert widths == sorted(w for _, _, w in graph.edges())


class TestMetrics:
    def test_format(self):
        rows = [MetricRow("regression", "ilong_0", 2, "std_rmse", 0.1), MetricRow("classification", "icat_0", 0, "accuracy", 1.0)]
        text = io.metrics_csv(rows)
        assert text.splitlines() == [
            "task,target,seed,metric,value",
            "regression,ilong_0,2,std_rmse,0.1",
            "classification,icat_0,0,accuracy,1.0",
        ]

    def test_config_hash_order_free(self):
        assert io.config_hash({"a": 1, "b": 2}) == io.config_hash({"b": 2, "a": 1})
        assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})
