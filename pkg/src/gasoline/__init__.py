"""Graph sanitation: modify a graph's topology and features along the hyper-gradient of a
validation loss so that a downstream GNN classifies better."""

from .diffnet import APPNP, GCN2, SGC, BackboneKind, TrainConfig, graph_hypergrad, train_dynamic
from .errors import BudgetError, ConfigError, DataError, DivergenceError, GasolineError, NoSignalError
from .evaluate import RunReport, eval_downstream
from .graph import Graph, LabelSet, load_graph, save_graph
from .harness import gradcheck, run_experiment
from .lowrank import LowRankConfig, LowRankDelta, lr_hypergrad, lr_sanitize
from .perturb import random_attack, sbm_generate, score_audit
from .sanitizer import SanitizeConfig, sanitize

__all__ = [
    "APPNP", "GCN2", "SGC", "BackboneKind", "TrainConfig", "graph_hypergrad", "train_dynamic",
    "BudgetError", "ConfigError", "DataError", "DivergenceError", "GasolineError", "NoSignalError",
    "RunReport", "eval_downstream", "Graph", "LabelSet", "load_graph", "save_graph",
    "gradcheck", "run_experiment", "LowRankConfig", "LowRankDelta", "lr_hypergrad", "lr_sanitize",
    "random_attack", "sbm_generate", "score_audit", "SanitizeConfig", "sanitize",
]
