"""Downstream evaluation: train on the whole labeled pool, score accuracy on the test set."""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffnet import BackboneKind, TrainConfig, forward, train_dynamic
from .errors import DataError
from .graph import Graph, LabelSet, normalize_adjacency
from .seeds import derive_seed, worker_count


@dataclass
class RunReport:
    accuracies: list[float]
    mean: float
    std: float
    config: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    graph_hash: str = ""

    @classmethod
    def from_accuracies(cls, accuracies, **kwargs) -> "RunReport":
        accs = [float(a) for a in accuracies]
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        return cls(accuracies=accs, mean=statistics.fmean(accs), std=std, **kwargs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def predict(kind: BackboneKind, g: Graph, labels: LabelSet, cfg: TrainConfig) -> np.ndarray:
    """Train on all of Z for ``cfg.T`` steps and return the argmax class of every node."""
    norm = normalize_adjacency(g)
    traj = train_dynamic(kind, norm, g.features, labels, labels.train_pool, cfg)
    return forward(kind, norm, g.features, traj.final).argmax(axis=1)


def eval_downstream(
    g: Graph,
    labels: LabelSet,
    kind: BackboneKind,
    cfg: TrainConfig,
    n_seeds: int = 10,
    master_seed: int = 0,
    timing: bool = True,
) -> RunReport:
    if len(labels.test) == 0:
        raise DataError("test set W is empty")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    t0 = time.perf_counter()
    W = labels.test

    def one(i):
        pred = predict(kind, g, labels, cfg.with_seed(derive_seed(master_seed, 0xE7A1, i)))
        return float(np.mean(pred[W] == labels.label[W]))

    workers = min(worker_count(), n_seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one, range(n_seeds)))
    else:
        accs = [one(i) for i in range(n_seeds)]
    config = {
        "backbone": asdict(kind),
        "train": asdict(cfg),
        "n_seeds": n_seeds,
        "master_seed": master_seed,
    }
    config["train"].pop("seed")
    wall = round((time.perf_counter() - t0) * 1000.0, 3) if timing else 0.0
    return RunReport.from_accuracies(accs, config=config, wall_ms=wall, graph_hash=g.content_hash())
