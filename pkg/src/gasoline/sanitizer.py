"""Fold-wise hyper-gradients and budgeted graph modification."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .diffnet import (
    BackboneKind,
    GraphGrad,
    TrainConfig,
    GCN2,
    graph_hypergrad,
    train_dynamic,
)
from .errors import BudgetError, ConfigError, NoSignalError
from .graph import Graph, LabelSet, make_folds, normalize_adjacency
from .seeds import derive_seed, worker_count

MODES = ("none", "discretized", "continuous")
VARIANTS = {
    "dt": ("discretized", "none"),
    "ct": ("continuous", "none"),
    "df": ("none", "discretized"),
    "cf": ("none", "continuous"),
    "dtcf": ("discretized", "continuous"),
}


@dataclass(frozen=True)
class SanitizeConfig:
    modify_topology: str = "discretized"
    modify_features: str = "none"
    rate_topo: float = 0.1
    rate_fea: float = 0.001
    steps: int = 10
    K: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneKind = field(default_factory=GCN2)
    master_seed: int = 0

    def __post_init__(self):
        for name in ("modify_topology", "modify_features"):
            if getattr(self, name) not in MODES:
                raise ConfigError(f"{name} must be one of {MODES}")
        if self.modify_topology == "none" and self.modify_features == "none":
            raise ConfigError("at least one of topology or features must be modified")
        if self.rate_topo < 0 or self.rate_fea < 0:
            raise ConfigError("modification rates must be non-negative")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> "SanitizeConfig":
        try:
            topo, fea = VARIANTS[variant.lower()]
        except KeyError:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(modify_topology=topo, modify_features=fea, **kwargs)


def floor_product(*factors) -> int:
    # Decimal avoids 0.29 * 100 -> 28.999999999999996
    total = Decimal(1)
    for f in factors:
        total *= Decimal(repr(f)) if isinstance(f, float) else Decimal(f)
    return int(total.to_integral_value(rounding="ROUND_FLOOR"))


def budgets(m: int, n: int, d: int, rate_topo: float, rate_fea: float) -> tuple[int, int]:
    """Total budgets ``(floor(m * rate_topo), floor(n * d * rate_fea))``."""
    return floor_product(m, rate_topo), floor_product(n, d, rate_fea)


def step_budget(B: int, steps: int) -> int:
    b = B // steps
    if b == 0:
        raise BudgetError(f"budget {B} is too small for {steps} steps")
    return b


def step_schedule(B: int, steps: int) -> list[int]:
    """Per-step budgets: ``b = floor(B / steps)`` repeated, the last one capped at what is left."""
    b = step_budget(B, steps)
    out, spent = [], 0
    while spent < B:
        out.append(min(b, B - spent))
        spent += out[-1]
    return out


# --------------------------------------------------------------------------
# gradient post-processing


def calibrate_symmetric(dA: np.ndarray) -> np.ndarray:
    """Total derivative for a symmetric variable: ``dA + dA' - diag(dA)``."""
    dA = np.asarray(dA, dtype=np.float64)
    if dA.ndim != 2 or dA.shape[0] != dA.shape[1]:
        raise ValueError("calibration needs a square matrix")
    out = dA + dA.T
    idx = np.arange(len(dA))
    out[idx, idx] -= dA[idx, idx]
    return out


def aggregate_folds(grads) -> GraphGrad:
    grads = list(grads)
    if not grads:
        raise ValueError("nothing to aggregate")
    total = grads[0]
    total = GraphGrad(
        None if total.dA is None else total.dA.copy(), None if total.dX is None else total.dX.copy(), total.loss
    )
    for g in grads[1:]:
        for name in ("dA", "dX"):
            a, b = getattr(total, name), getattr(g, name)
            if (a is None) != (b is None) or (a is not None and a.shape != b.shape):
                raise ValueError(f"fold gradients disagree on {name}")
            if a is not None:
                a += b
        total.loss = g.loss
    return total


def score_matrix(dA: np.ndarray, A) -> np.ndarray:
    """``(-dA) * (1 - 2A)`` with the diagonal masked to -inf."""
    if isinstance(A, Graph):
        if not A.is_binary:
            raise ValueError("discretized scoring needs an unweighted adjacency")
        A = A.dense_adjacency()
    A = np.asarray(A, dtype=np.float64)
    if not np.all((A == 0) | (A == 1)):
        raise ValueError("discretized scoring needs a binary adjacency")
    S = -np.asarray(dA) * (1.0 - 2.0 * A)
    np.fill_diagonal(S, -np.inf)
    return S


def feature_score(dX: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if not np.all((X == 0) | (X == 1)):
        raise ValueError("discretized feature modification needs binary features")
    return -np.asarray(dX) * (1.0 - 2.0 * X)


def top_b(values: np.ndarray, b: int) -> np.ndarray:
    """Indices of the ``b`` largest values; ties go to the smaller index."""
    values = np.asarray(values)
    if b < 1:
        raise BudgetError("per-step budget must be >= 1")
    if b > len(values):
        raise BudgetError(f"budget {b} exceeds the {len(values)} candidate entries")
    kth = np.partition(values, len(values) - b)[len(values) - b]
    cand = np.flatnonzero(values >= kth)
    order = np.lexsort((cand, -values[cand]))
    return cand[order[:b]]


def apply_discretized(target: np.ndarray, S: np.ndarray, b: int, symmetric: bool = True):
    """Flip the top-``b`` scored entries of a binary matrix.

    With ``symmetric`` the candidates are the strict upper triangle and each
    flip toggles both mirrored entries. Returns ``(modified, flips)`` where
    ``flips`` lists ``(i, j, old, new)``.
    """
    target = np.array(target, dtype=np.float64, copy=True)
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("discretized modification needs a binary target")
    if symmetric:
        iu, ju = np.triu_indices(len(target), 1)
        chosen = top_b(np.asarray(S)[iu, ju], b)
        rows, cols = iu[chosen], ju[chosen]
    else:
        chosen = top_b(np.asarray(S).ravel(), b)
        rows, cols = np.unravel_index(chosen, target.shape)
    flips = []
    for i, j in zip(rows.tolist(), cols.tolist()):
        old = target[i, j]
        target[i, j] = 1.0 - old
        if symmetric:
            target[j, i] = 1.0 - old
        flips.append((i, j, int(old), int(1 - old)))
    return target, flips


def apply_continuous(target: np.ndarray, grad: np.ndarray, b: float, symmetric: bool = True):
    """Gradient step with learning rate ``b / sum|grad|``.

    With ``symmetric`` the target is an adjacency: its diagonal is frozen
    (and excluded from the normalizer) and the result is clamped to [0, 1].
    Returns ``(modified, change)`` where ``change`` is the pre-clamp step.
    """
    g = np.array(grad, dtype=np.float64, copy=True)
    if symmetric:
        np.fill_diagonal(g, 0.0)
    total = np.abs(g).sum()
    if total == 0:
        raise NoSignalError("all-zero gradient: nothing left to modify")
    change = (b / total) * g
    out = np.asarray(target, dtype=np.float64) - change
    if symmetric:
        np.clip(out, 0.0, 1.0, out=out)
        np.fill_diagonal(out, 0.0)
    return out, change


# --------------------------------------------------------------------------
# the outer loop


def fold_hypergrad(cfg: SanitizeConfig, g: Graph, labels: LabelSet, train, valid, seed: int, want_dA: bool = True):
    """Train a fresh backbone on ``train`` and return its hyper-gradient on ``valid``."""
    norm = normalize_adjacency(g)
    traj = train_dynamic(cfg.backbone, norm, g.features, labels, train, cfg.train.with_seed(seed))
    return graph_hypergrad(cfg.backbone, g, traj.snapshots, labels, valid, want_dA)


def run_folds(fn, K: int):
    """Evaluate ``fn(k)`` for every fold, possibly concurrently, in fold order."""
    workers = min(worker_count(), K)
    if workers <= 1:
        return [fn(k) for k in range(K)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(K)))


def sanitize(g: Graph, labels: LabelSet, cfg: SanitizeConfig, timing: bool = True, log=None):
    """Hyper-gradient guided modification of ``g`` until the budgets are spent.

    Returns ``(modified graph, audit records)``. ``log``, when given, is called
    with each audit record as it is produced.
    """
    if len(labels.train_pool) < cfg.K:
        raise ConfigError(f"labeled pool of {len(labels.train_pool)} is smaller than K={cfg.K}")
    B_topo, B_fea = budgets(g.m, g.n, g.d, cfg.rate_topo, cfg.rate_fea)
    total = {}
    per_step = {}
    if cfg.modify_topology != "none":
        if cfg.modify_topology == "discretized" and not g.is_binary:
            raise ConfigError("discretized topology modification needs an unweighted graph")
        total["topo"], per_step["topo"] = B_topo, step_budget(B_topo, cfg.steps)
    if cfg.modify_features != "none":
        if cfg.modify_features == "discretized" and not np.all((g.features == 0) | (g.features == 1)):
            raise ConfigError("discretized feature modification needs binary features")
        total["fea"], per_step["fea"] = B_fea, step_budget(B_fea, cfg.steps)

    plan = make_folds(labels, cfg.K, derive_seed(cfg.master_seed, 0xF01D))
    A = g.dense_adjacency()
    X = np.array(g.features, dtype=np.float64, copy=True)
    spent = {key: 0 for key in total}
    done = set()
    audit = []
    step = 0
    while any(spent[key] < total[key] and key not in done for key in total):
        t0 = time.perf_counter()
        current = Graph.from_dense(A, X)
        want_dA = "topo" in total and "topo" not in done and spent["topo"] < total["topo"]

        def one_fold(k, step=step, current=current, want_dA=want_dA):
            train, valid = plan.split(k)
            seed = derive_seed(cfg.master_seed, step, k)
            return fold_hypergrad(cfg, current, labels, train, valid, seed, want_dA)

        fold_grads = run_folds(one_fold, cfg.K)
        agg = aggregate_folds(fold_grads)
        record = {"step": step, "fold_losses": [fg.loss for fg in fold_grads]}
        n_flips = 0
        if want_dA:
            dA = calibrate_symmetric(agg.dA)
            b = min(per_step["topo"], total["topo"] - spent["topo"])
            if cfg.modify_topology == "discretized":
                A, flips = apply_discretized(A, score_matrix(dA, A), b, symmetric=True)
                record["flips_topo"] = [list(f) for f in flips]
                n_flips += len(flips)
                spent["topo"] += b
            else:
                try:
                    A, change = apply_continuous(A, dA, b, symmetric=True)
                    record["l1_change_topo"] = float(np.abs(change).sum())
                    spent["topo"] += b
                except NoSignalError:
                    done.add("topo")
        if "fea" in total and "fea" not in done and spent["fea"] < total["fea"]:
            b = min(per_step["fea"], total["fea"] - spent["fea"])
            if cfg.modify_features == "discretized":
                X, flips = apply_discretized(X, feature_score(agg.dX, X), b, symmetric=False)
                record["flips_fea"] = [list(f) for f in flips]
                n_flips += len(flips)
                spent["fea"] += b
            else:
                try:
                    X, change = apply_continuous(X, agg.dX, b, symmetric=False)
                    record["l1_change_fea"] = float(np.abs(change).sum())
                    spent["fea"] += b
                except NoSignalError:
                    done.add("fea")
        record["budget_spent_topo"] = spent.get("topo", 0)
        record["budget_spent_fea"] = spent.get("fea", 0)
        record["n_flips"] = n_flips
        record["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3) if timing else 0
        audit.append(record)
        if log is not None:
            log(record)
        step += 1
    return Graph.from_dense(A, X), audit
