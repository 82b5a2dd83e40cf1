"""Low-rank topology increments: ``A + sym(U V')`` handled without n x n storage.

The modified adjacency is ``A + (U V' + V U') / 2``. Propagation uses the
sparse part plus rank-r products; the hyper-gradient with respect to U and V
is assembled from the factored operator gradient returned by
:func:`gasoline.diffnet.backward`, so nothing of size n x n is allocated.
"""

from __future__ import annotations

import time
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .diffnet import (
    BackboneKind,
    GCN2,
    TrainConfig,
    _ce,
    _labels_array,
    backward,
    degree_chain,
    forward,
    forward_with_cache,
    train_dynamic,
)
from .errors import ConfigError, DivergenceError
from .graph import Graph, LabelSet, fmt_number, make_folds
from .sanitizer import run_folds
from .seeds import derive_seed

DEGREE_FLOOR = 1e-6


class NegativeDegreeError(DivergenceError):
    pass


@dataclass(frozen=True, eq=False)
class LowRankDelta:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if U.ndim != 2 or U.shape != V.shape or U.shape[1] < 1:
            raise ValueError("U and V must both be n x r with r >= 1")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DivergenceError("non-finite low-rank factors")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @classmethod
    def zeros(cls, n: int, r: int) -> "LowRankDelta":
        return cls(np.zeros((n, r)), np.zeros((n, r)))

    @classmethod
    def random(cls, n: int, r: int, seed: int, scale: float = 1e-3) -> "LowRankDelta":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, (n, r)), rng.uniform(-scale, scale, (n, r)))

    def sym_fro_norm(self) -> float:
        """Frobenius norm of ``(U V' + V U') / 2`` via traces of r x r products."""
        UtU, VtV, VtU = self.U.T @ self.U, self.V.T @ self.V, self.V.T @ self.U
        sq = 0.5 * (np.sum(UtU * VtV) + np.sum(VtU * VtU.T))
        return float(np.sqrt(max(sq, 0.0)))

    def dense(self) -> np.ndarray:
        """Materialized ``sym(U V')``; only for small n and tests."""
        P = self.U @ self.V.T
        return 0.5 * (P + P.T)

    def __eq__(self, other):
        if not isinstance(other, LowRankDelta):
            return NotImplemented
        return np.array_equal(self.U, other.U) and np.array_equal(self.V, other.V)

    __hash__ = None


class LowRankOperator:
    """Symmetric propagation operator for ``A + sym(U V')``.

    With ``normalize`` it is ``D^-1/2 (A + I + sym(U V')) D^-1/2`` using
    effective degrees ``A 1 + 1 + (U (V' 1) + V (U' 1)) / 2`` floored at
    ``DEGREE_FLOOR``; otherwise it is the raw ``A + sym(U V')``.
    """

    def __init__(self, g: Graph, delta: LowRankDelta, normalize: bool = True):
        if delta.U.shape[0] != g.n:
            raise ValueError("low-rank factors do not match the node count")
        self.n = g.n
        self.U, self.V = delta.U, delta.V
        self.normalize = normalize
        A = g.adjacency()
        if normalize:
            self.M = (A + sp.identity(g.n, format="csr")).tocsr()
            ones = np.ones(g.n)
            deg = np.asarray(self.M.sum(axis=1)).ravel() + 0.5 * (self.U @ (self.V.T @ ones) + self.V @ (self.U.T @ ones))
            if np.any(deg < 0):
                i = int(np.argmin(deg))
                raise NegativeDegreeError(f"effective degree of node {i} is negative ({deg[i]:.3g})")
            self.floored = deg < DEGREE_FLOOR
            self.deg = np.maximum(deg, DEGREE_FLOOR)
            self.s = 1.0 / np.sqrt(self.deg)
        else:
            self.M = A.tocsr()
            self.s = None

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def T(self):
        return self

    def _raw(self, Z):
        return self.M @ Z + 0.5 * (self.U @ (self.V.T @ Z) + self.V @ (self.U.T @ Z))

    def __matmul__(self, Z):
        Z = np.asarray(Z)
        if self.s is None:
            return self._raw(Z)
        col = self.s[:, None] if Z.ndim == 2 else self.s
        return col * self._raw(col * Z)


def lr_propagate(kind: BackboneKind, g: Graph, delta: LowRankDelta, X, theta, normalize: bool = True) -> np.ndarray:
    return forward(kind, LowRankOperator(g, delta, normalize), np.asarray(X, dtype=np.float64), theta)


def _factor_grads(op: LowRankOperator, pairs):
    """dU, dV given the operator gradient ``sum_p L_p R_p'`` (never formed).

    Pairs are processed one at a time so the working set stays at n x c.
    """
    U, V = op.U, op.V
    dU, dV = np.zeros_like(U), np.zeros_like(V)
    if op.s is None:
        for L, R in pairs:
            dU += 0.5 * (L @ (R.T @ V) + R @ (L.T @ V))
            dV += 0.5 * (R @ (L.T @ U) + L @ (R.T @ U))
        return dU, dV
    s = op.s
    M = op.M.tocoo()
    sU, sV = s[:, None] * U, s[:, None] * V
    gs = np.zeros(op.n)
    for L, R in pairs:
        gs += degree_chain(M, s, L, R)
        a, b = L @ (R.T @ sV), R @ (L.T @ sU)
        c, d = L @ (R.T @ sU), R @ (L.T @ sV)
        # rank-r part of sum_j G_ij M_ij s_j + sum_j G_ji M_ji s_j
        gs += 0.5 * ((a * U).sum(1) + (b * V).sum(1) + (c * V).sum(1) + (d * U).sum(1))
        # diag(s) L R' diag(s) terms of (dM + dM') V / 2 and (dM + dM') U / 2
        dU += 0.5 * s[:, None] * (a + d)
        dV += 0.5 * s[:, None] * (b + c)
    g = np.where(op.floored, 0.0, -0.5 * s**3 * gs)
    # degree part dM = g 1'
    dU += 0.5 * (np.outer(g, V.sum(0)) + (g @ V)[None, :])
    dV += 0.5 * ((g @ U)[None, :] + np.outer(g, U.sum(0)))
    return dU, dV


def lr_hypergrad(
    kind: BackboneKind,
    g: Graph,
    delta: LowRankDelta,
    snapshots,
    labels,
    valid_set,
    normalize: bool = True,
    return_loss: bool = False,
):
    """Snapshot-summed gradient of the validation loss with respect to ``(U, V)``."""
    if not snapshots:
        raise ValueError("need at least one parameter snapshot")
    op = LowRankOperator(g, delta, normalize)
    X = np.asarray(g.features)
    y = _labels_array(labels)
    dU = np.zeros_like(delta.U)
    dV = np.zeros_like(delta.V)
    loss = float("nan")
    for snap in snapshots:
        W = snap.weights if hasattr(snap, "weights") else snap
        logits, cache = forward_with_cache(kind, op, X, W)
        loss, dlog = _ce(logits, y, valid_set, grad=True)
        _, _, pairs = backward(kind, op, X, W, cache, dlog, graph=True)
        gu, gv = _factor_grads(op, pairs)
        dU += gu
        dV += gv
    if return_loss:
        return dU, dV, loss
    return dU, dV


@dataclass(frozen=True)
class LowRankConfig:
    rank: int = 32
    lr_delta: float = 0.01
    lr_steps: int = 10
    K: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneKind = field(default_factory=GCN2)
    master_seed: int = 0
    normalize: bool = True
    # effective entries at or below this weight are dropped from the output graph
    prune: float = 1e-3

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.lr_steps < 0:
            raise ConfigError("lr_steps must be >= 0")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if not (0 <= self.prune < 1):
            raise ConfigError("prune must lie in [0, 1)")


def materialize(g: Graph, delta: LowRankDelta, prune: float = 0.0, block: int = 256) -> Graph:
    """Clamp ``A + sym(U V')`` to [0, 1] row block by row block and return it as a weighted graph."""
    A = g.adjacency().tocsr()
    U, V = delta.U, delta.V
    rows, cols, vals = [], [], []
    for a in range(0, g.n, block):
        b = min(a + block, g.n)
        blk = A[a:b].toarray() + 0.5 * (U[a:b] @ V.T + V[a:b] @ U.T)
        np.clip(blk, 0.0, 1.0, out=blk)
        r, c = np.nonzero(blk > prune)
        keep = c > r + a
        rows.append(r[keep] + a)
        cols.append(c[keep])
        vals.append(blk[r[keep], c[keep]])
    edges = np.stack([np.concatenate(rows), np.concatenate(cols)], axis=1)
    w = np.concatenate(vals)
    return Graph(g.n, edges, g.features, None if np.all(w == 1.0) else w)


def lr_sanitize(g: Graph, labels: LabelSet, cfg: LowRankConfig, timing: bool = True, log=None):
    """Fixed-step gradient descent on ``(U, V)`` with K-fold aggregated hyper-gradients.

    Returns ``(weighted graph, LowRankDelta, audit records)``.
    """
    if len(labels.train_pool) < cfg.K:
        raise ConfigError(f"labeled pool of {len(labels.train_pool)} is smaller than K={cfg.K}")
    delta = LowRankDelta.random(g.n, cfg.rank, derive_seed(cfg.master_seed, 0x10E))
    audit = []
    if cfg.lr_steps == 0:
        return g, delta, audit
    plan = make_folds(labels, cfg.K, derive_seed(cfg.master_seed, 0xF01D))
    X = np.asarray(g.features)
    for step in range(cfg.lr_steps):
        t0 = time.perf_counter()
        op = LowRankOperator(g, delta, cfg.normalize)

        def one_fold(k, step=step, op=op, delta=delta):
            train, valid = plan.split(k)
            tc = cfg.train.with_seed(derive_seed(cfg.master_seed, step, k))
            traj = train_dynamic(cfg.backbone, op, X, labels, train, tc)
            return lr_hypergrad(cfg.backbone, g, delta, traj.snapshots, labels, valid, cfg.normalize, return_loss=True)

        results = run_folds(one_fold, cfg.K)
        dU = np.zeros_like(delta.U)
        dV = np.zeros_like(delta.V)
        for gu, gv, _ in results:
            dU += gu
            dV += gv
        U = delta.U - cfg.lr_delta * dU
        V = delta.V - cfg.lr_delta * dV
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DivergenceError("low-rank factors diverged", step=step)
        delta = LowRankDelta(U, V)
        record = {
            "step": step,
            "fold_losses": [loss for _, _, loss in results],
            "budget_spent_topo": delta.sym_fro_norm(),
            "budget_spent_fea": 0,
            "n_flips": 0,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if timing else 0,
        }
        audit.append(record)
        if log is not None:
            log(record)
    return materialize(g, delta, cfg.prune), delta, audit


def write_factors(delta: LowRankDelta, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, mat in (("U.tsv", delta.U), ("V.tsv", delta.V)):
        with open(directory / name, "w", encoding="utf-8", newline="\n") as fh:
            for row in mat.tolist():
                fh.write("\t".join(fmt_number(v) for v in row) + "\n")


def read_factors(directory) -> LowRankDelta:
    directory = Path(directory)
    mats = [np.loadtxt(directory / name, delimiter="\t", ndmin=2) for name in ("U.tsv", "V.tsv")]
    return LowRankDelta(*mats)
