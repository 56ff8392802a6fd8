"""Functional graph convolutional networks for multi-modal longitudinal data."""

from .embedding import Dataset, EmbeddedTensor, Feature, Modality, assemble
from .evaluate import decode, std_rmse
from .fda import BSplineBasis, Curve, DiscreteSamples, Domain, make_bspline_basis
from .gcn import TaskSpec, TrainConfig, TrainedModel, predict, train
from .graph import KnowledgeGraph, SolverConfig, estimate_graph
from .protocol import ProtocolConfig, run_protocol, run_replication
from .synth import ScenarioConfig, generate_scenario

__version__ = "0.1.0"

__all__ = [
    "BSplineBasis", "Curve", "Dataset", "DiscreteSamples", "Domain", "EmbeddedTensor", "Feature",
    "KnowledgeGraph", "Modality", "ProtocolConfig", "ScenarioConfig", "SolverConfig", "TaskSpec",
    "TrainConfig", "TrainedModel", "assemble", "decode", "estimate_graph", "generate_scenario",
    "make_bspline_basis", "predict", "run_protocol", "run_replication", "std_rmse", "train",
]
