"""MINAR: neuron-level circuit discovery for min-aggregation graph neural networks.

The pipeline is data generation (:mod:`minar.graphs`), the model
(:mod:`minar.gnn`), reverse-mode gradients (:mod:`minar.autodiff`),
training (:mod:`minar.training`), the neuron-level computation graph
(:mod:`minar.compgraph`), edge scoring (:mod:`minar.attribution`) and circuit
extraction and evaluation (:mod:`minar.circuits`).
"""

from .attribution import ScoreTable, score
from .circuits import (Circuit, apply_circuit, characterization, describe_circuit, discover_circuit,
                       fidelity_report, weighted_jaccard)
from .compgraph import ComputationGraph, build_computation_graph
from .gnn import ModelConfig, bellman_ford_params, init_params, model_forward
from .graphs import (AttributedGraph, generate_bellman_ford_trainset, generate_ood_testset,
                     k_step_bellman_ford, make_probes)
from .training import TrainConfig, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "AttributedGraph", "Circuit", "ComputationGraph", "ModelConfig", "ScoreTable", "TrainConfig",
    "apply_circuit", "bellman_ford_params", "build_computation_graph", "characterization",
    "describe_circuit", "discover_circuit", "evaluate", "fidelity_report", "generate_bellman_ford_trainset",
    "generate_ood_testset", "init_params", "k_step_bellman_ford", "make_probes", "model_forward", "score",
    "train_model", "weighted_jaccard",
]
