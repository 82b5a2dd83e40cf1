"""Differentiable backbone classifiers (SGC, two-layer GCN, APPNP).

Gradients are written out by hand in numpy. Every propagation operator is
used only through ``adj @ Z`` and ``adj.T @ Z``, so the same code runs on a
:class:`~gasoline.graph.NormAdj`, a dense array, a scipy sparse matrix or the
implicit low-rank operator in :mod:`gasoline.lowrank`.

The backward pass reports the gradient with respect to the propagation
operator as a list of ``(left, right)`` factor pairs whose sum of
``left @ right.T`` is that gradient. Keeping it factored is what lets the
low-rank variant avoid any n x n intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DivergenceError
from .graph import Graph, LabelSet, normalize_adjacency

BACKBONES = ("sgc", "gcn", "appnp")


@dataclass(frozen=True)
class BackboneKind:
    name: str
    k: int = 2
    hidden: int = 16
    alpha: float = 0.1
    k_prop: int = 10

    def __post_init__(self):
        if self.name not in BACKBONES:
            raise ValueError(f"unknown backbone {self.name!r}")
        if self.k < 1 or self.hidden < 1 or self.k_prop < 1:
            raise ValueError("k, hidden and k_prop must be >= 1")
        if self.name == "appnp" and not (0 < self.alpha <= 1):
            raise ValueError("APPNP teleport alpha must lie in (0, 1]")

    def shapes(self, d: int, c: int) -> list[tuple[int, int]]:
        if self.name == "sgc":
            return [(d, c)]
        return [(d, self.hidden), (self.hidden, c)]


def SGC(k: int = 2) -> BackboneKind:
    return BackboneKind("sgc", k=k)


def GCN2(hidden: int = 16) -> BackboneKind:
    return BackboneKind("gcn", hidden=hidden)


def APPNP(alpha: float = 0.1, k_prop: int = 10, hidden: int = 64) -> BackboneKind:
    return BackboneKind("appnp", alpha=alpha, k_prop=k_prop, hidden=hidden)


def backbone_from_name(name: str) -> BackboneKind:
    return {"sgc": SGC, "gcn": GCN2, "gcn2": GCN2, "appnp": APPNP}[name.lower()]()


@dataclass(frozen=True, eq=False)
class ModelState:
    weights: tuple[np.ndarray, ...]
    t: int = 0

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return self.t == other.t and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    T: int = 200
    P: int = 196
    lr: float = 0.01
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    seed: int = 0
    # also keep the snapshot at t == P (sum written from P rather than P + 1)
    inclusive_truncation: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0 <= self.P < self.T):
            raise ValueError("P must satisfy 0 <= P < T")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass(eq=False)
class GraphGrad:
    """Gradient of the validation loss with respect to raw A (n x n) and X (n x d).

    ``dA`` is ``None`` when only the feature gradient was requested. ``loss``
    is the validation loss at the last snapshot.
    """

    dA: np.ndarray
    dX: np.ndarray
    loss: float = float("nan")

    def __add__(self, other: "GraphGrad") -> "GraphGrad":
        if self.dX.shape != other.dX.shape or (self.dA is None) != (other.dA is None):
            raise ValueError("GraphGrad shape mismatch")
        if self.dA is None:
            return GraphGrad(None, self.dX + other.dX, other.loss)
        if self.dA.shape != other.dA.shape:
            raise ValueError("GraphGrad shape mismatch")
        return GraphGrad(self.dA + other.dA, self.dX + other.dX, other.loss)


@dataclass
class Trajectory:
    snapshots: list[ModelState]
    final: ModelState
    losses: list[float] = field(default_factory=list)


# --------------------------------------------------------------------------
# forward / backward


def _labels_array(labels) -> np.ndarray:
    return np.asarray(labels.label if isinstance(labels, LabelSet) else labels)


def _check_shapes(kind: BackboneKind, adj, X, W) -> None:
    n, d = X.shape
    if adj.shape != (n, n):
        raise ValueError(f"operator shape {adj.shape} does not match {n} nodes")
    expected = kind.shapes(d, W[-1].shape[1])
    got = [w.shape for w in W]
    if got != expected:
        raise ValueError(f"weight shapes {got} do not match backbone {kind.name}: {expected}")


def forward_with_cache(kind: BackboneKind, adj, X: np.ndarray, W) -> tuple[np.ndarray, dict]:
    _check_shapes(kind, adj, X, W)
    if kind.name == "sgc":
        Z = [X @ W[0]]
        for _ in range(kind.k):
            Z.append(adj @ Z[-1])
        return Z[-1], {"Z": Z}
    if kind.name == "gcn":
        Q = X @ W[0]
        H1 = adj @ Q
        R = np.maximum(H1, 0.0)
        M = R @ W[1]
        return adj @ M, {"Q": Q, "H1": H1, "R": R, "M": M}
    pre = X @ W[0]
    H0 = np.maximum(pre, 0.0)
    H = H0 @ W[1]
    a = kind.alpha
    Z = [H]
    for _ in range(kind.k_prop):
        Z.append((1 - a) * (adj @ Z[-1]) + a * H)
    return Z[-1], {"pre": pre, "H0": H0, "Z": Z}


def forward(kind: BackboneKind, adj, X: np.ndarray, theta) -> np.ndarray:
    W = theta.weights if isinstance(theta, ModelState) else theta
    return forward_with_cache(kind, adj, X, W)[0]


def backward(kind: BackboneKind, adj, X, W, cache, dlogits, graph: bool = True):
    """Return ``(dW list, dX, pairs)``; ``pairs`` factor the operator gradient."""
    pairs = []
    if kind.name == "sgc":
        Z = cache["Z"]
        dZ = dlogits
        for s in range(kind.k, 0, -1):
            if graph:
                pairs.append((dZ, Z[s - 1]))
            dZ = adj.T @ dZ
        return [X.T @ dZ], dZ @ W[0].T, pairs
    if kind.name == "gcn":
        if graph:
            pairs.append((dlogits, cache["M"]))
        dM = adj.T @ dlogits
        dW2 = cache["R"].T @ dM
        dH1 = (dM @ W[1].T) * (cache["H1"] > 0)
        if graph:
            pairs.append((dH1, cache["Q"]))
        dQ = adj.T @ dH1
        return [X.T @ dQ, dW2], dQ @ W[0].T, pairs
    a = kind.alpha
    Z = cache["Z"]
    dZ = dlogits
    dH = np.zeros_like(dlogits)
    for s in range(kind.k_prop - 1, -1, -1):
        if graph:
            pairs.append(((1 - a) * dZ, Z[s]))
        dH += a * dZ
        dZ = (1 - a) * (adj.T @ dZ)
    dH += dZ
    dW2 = cache["H0"].T @ dH
    dpre = (dH @ W[1].T) * (cache["pre"] > 0)
    return [X.T @ dpre, dW2], dpre @ W[0].T, pairs


def _ce(logits: np.ndarray, y: np.ndarray, nodes: np.ndarray, grad: bool):
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("cross-entropy over an empty node set")
    yn = y[nodes]
    if np.any(yn < 0):
        raise ValueError("cross-entropy over unlabeled nodes")
    z = logits[nodes]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(nodes)), yn]))
    if not grad:
        return loss, None
    p = np.exp(z - lse[:, None])
    p[np.arange(len(nodes)), yn] -= 1.0
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, nodes, p / len(nodes))
    return loss, dlogits


def ce_loss(logits: np.ndarray, labels, nodes) -> float:
    """Mean cross-entropy of ``logits`` over ``nodes``."""
    return _ce(np.asarray(logits, dtype=np.float64), _labels_array(labels), nodes, grad=False)[0]


# --------------------------------------------------------------------------
# training


def glorot_init(shapes, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    out = []
    for fan_in, fan_out in shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return tuple(out)


def propagate(adj, X: np.ndarray, k: int) -> np.ndarray:
    for _ in range(k):
        X = adj @ X
    return X


class _Objective:
    """Training loss (cross-entropy + weight decay) and its parameter gradient."""

    def __init__(self, kind, adj, X, y, nodes, weight_decay):
        self.kind, self.adj, self.X = kind, adj, X
        self.y, self.nodes, self.wd = y, np.asarray(nodes, dtype=np.int64), weight_decay
        # SGC is linear in W after k fixed propagations
        self.px = propagate(adj, X, kind.k) if kind.name == "sgc" else None

    def __call__(self, W):
        if self.px is not None:
            logits = self.px @ W[0]
            loss, dlog = _ce(logits, self.y, self.nodes, grad=True)
            grads = [self.px.T @ dlog]
        else:
            logits, cache = forward_with_cache(self.kind, self.adj, self.X, W)
            loss, dlog = _ce(logits, self.y, self.nodes, grad=True)
            grads, _, _ = backward(self.kind, self.adj, self.X, W, cache, dlog, graph=False)
        if self.wd:
            loss += self.wd * sum(float(np.sum(w * w)) for w in W)
            grads = [g + 2.0 * self.wd * w for g, w in zip(grads, W)]
        return loss, grads


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, W, grads):
        if self.m is None:
            self.m = [np.zeros_like(w) for w in W]
            self.v = [np.zeros_like(w) for w in W]
        self.t += 1
        out = []
        for i, (w, g) in enumerate(zip(W, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(w - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


class GradientDescent:
    def __init__(self, lr):
        self.lr = lr

    def step(self, W, grads):
        return [w - self.lr * g for w, g in zip(W, grads)]


def init_state(kind: BackboneKind, d: int, c: int, seed: int) -> ModelState:
    return ModelState(glorot_init(kind.shapes(d, c), np.random.default_rng(seed)), t=0)


def train_dynamic(kind: BackboneKind, adj, X, labels, train_set, cfg: TrainConfig) -> Trajectory:
    """Run T full-batch optimizer steps and keep the snapshots after step P.

    Step ``t`` maps theta^t to theta^(t+1); the new state is retained when
    ``t > P`` (or ``t >= P`` with ``cfg.inclusive_truncation``).
    """
    y = _labels_array(labels)
    c = labels.classes if isinstance(labels, LabelSet) else int(y.max()) + 1
    train_set = np.asarray(train_set, dtype=np.int64)
    if train_set.size == 0:
        raise ValueError("empty training set")
    X = np.asarray(X, dtype=np.float64)
    objective = _Objective(kind, adj, X, y, train_set, cfg.weight_decay)
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else GradientDescent(cfg.lr)
    state = init_state(kind, X.shape[1], c, cfg.seed)
    W = list(state.weights)
    snapshots, losses = [], []
    if cfg.inclusive_truncation and cfg.P == 0:
        snapshots.append(state)
    for t in range(1, cfg.T + 1):
        loss, grads = objective(W)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError("non-finite training loss", step=t)
        losses.append(loss)
        W = opt.step(W, grads)
        if t > cfg.P or (cfg.inclusive_truncation and t == cfg.P):
            snapshots.append(ModelState(tuple(W), t=t))
    final = ModelState(tuple(W), t=cfg.T)
    if not all(np.all(np.isfinite(w)) for w in W):
        raise DivergenceError("non-finite parameters", step=cfg.T)
    return Trajectory(snapshots=snapshots, final=final, losses=losses)


# --------------------------------------------------------------------------
# gradients with respect to the graph


def normalize_raw(M: sp.spmatrix, floor: float | None = None):
    """Normalize an arbitrary (possibly asymmetric) matrix that already contains self-loops.

    Returns ``(P, s)`` with ``P = diag(s) M diag(s)`` and ``s = rowsum(M) ** -0.5``.
    """
    M = sp.coo_matrix(M)
    deg = np.asarray(M.sum(axis=1)).ravel()
    if floor is not None:
        deg = np.maximum(deg, floor)
    s = 1.0 / np.sqrt(deg)
    P = sp.csr_matrix((M.data * (s[M.row] * s[M.col]), (M.row, M.col)), shape=M.shape)
    return P, s


def factor_products(L: np.ndarray, R: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Entries ``(L @ R.T)[rows, cols]`` without forming the full product."""
    out = np.empty(len(rows))
    step = 1 << 16
    for a in range(0, len(rows), step):
        r, c = rows[a : a + step], cols[a : a + step]
        out[a : a + step] = np.einsum("ij,ij->i", L[r], R[c])
    return out


def degree_chain(M: sp.coo_matrix, s: np.ndarray, L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Gradient through ``s = deg ** -0.5`` contributed by the sparse part ``M``.

    Returns ``sum_j G_kj M_kj s_j + sum_i G_ik M_ik s_i`` for ``G = L @ R.T``.
    """
    vals = factor_products(L, R, M.row, M.col) * M.data
    gs = np.bincount(M.row, weights=vals * s[M.col], minlength=len(s))
    gs += np.bincount(M.col, weights=vals * s[M.row], minlength=len(s))
    return gs


def operator_to_adjacency_grad(M: sp.coo_matrix, s: np.ndarray, pairs) -> np.ndarray:
    """Chain the factored operator gradient back to the raw adjacency entries.

    P_ij = s_i M_ij s_j with s_i = (sum_j M_ij) ** -0.5, so
    dL/dM_ij = G_ij s_i s_j - 0.5 s_i^3 (sum_j G_ij M_ij s_j + sum_j G_ji M_ji s_j).
    """
    L = np.hstack([l for l, _ in pairs])
    R = np.hstack([r for _, r in pairs])
    gdeg = -0.5 * s**3 * degree_chain(M, s, L, R)
    dA = (L * s[:, None]) @ (R * s[:, None]).T
    dA += gdeg[:, None]
    return dA


def snapshot_graph_grad(kind, P, M, s, X, W, y, valid_set, want_dA=True):
    logits, cache = forward_with_cache(kind, P, X, W)
    loss, dlog = _ce(logits, y, valid_set, grad=True)
    _, dX, pairs = backward(kind, P, X, W, cache, dlog, graph=want_dA)
    dA = operator_to_adjacency_grad(M, s, pairs) if want_dA else None
    return loss, dA, dX


def raw_graph_hypergrad(kind: BackboneKind, A: np.ndarray, X, snapshots, labels, valid_set) -> GraphGrad:
    """First-order hyper-gradient for an arbitrary dense real adjacency ``A``.

    Self-loops are added before normalization; ``A`` need not be symmetric.
    """
    if not snapshots:
        raise ValueError("need at least one parameter snapshot")
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if A.shape != (X.shape[0], X.shape[0]):
        raise ValueError("adjacency and feature shapes disagree")
    M = sp.coo_matrix(A + np.eye(len(A)))
    return _accumulate(kind, M, X, snapshots, _labels_array(labels), valid_set)


def _accumulate(kind, M, X, snapshots, y, valid_set, want_dA=True) -> GraphGrad:
    P, s = normalize_raw(M)
    total = None
    for snap in snapshots:
        W = snap.weights if isinstance(snap, ModelState) else snap
        loss, dA, dX = snapshot_graph_grad(kind, P, M, s, X, W, y, valid_set, want_dA)
        total = GraphGrad(dA, dX, loss) if total is None else total + GraphGrad(dA, dX, loss)
    return total


def graph_hypergrad(kind: BackboneKind, g: Graph, snapshots, labels, valid_set, want_dA: bool = True) -> GraphGrad:
    """Sum over snapshots of d(validation CE)/d(A, X), parameters held fixed.

    ``dA`` is the partial derivative with respect to each raw entry A[i, j]
    treated independently (calibrate before use on a symmetric graph).
    """
    if not snapshots:
        raise ValueError("need at least one parameter snapshot")
    norm = normalize_adjacency(g)
    M = norm.raw.tocoo()
    return _accumulate(kind, M, g.features, snapshots, _labels_array(labels), valid_set, want_dA)
