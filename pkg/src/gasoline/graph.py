"""Graph data model, on-disk directory format, adjacency normalization and folds."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import GraphFormatError

UNLABELED = -1
SPLIT_TOKENS = ("TRAIN-POOL", "TEST", "NONE")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def fmt_number(v: float) -> str:
    """Shortest text that parses back to exactly ``v``; integral values print without a dot."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with a dense feature matrix.

    ``edges`` holds unordered pairs as rows ``(i, j)`` with ``i < j``, sorted
    lexicographically. ``weights`` is ``None`` for an unweighted graph.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError("graph needs at least one node")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = None if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if weights is not None and len(weights) != len(edges):
            raise ValueError("weights must align with edges")
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        order = np.lexsort((hi, lo))
        edges = np.stack([lo[order], hi[order]], axis=1) if len(edges) else np.zeros((0, 2), np.int64)
        if len(edges) > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise ValueError("duplicate edge")
        if weights is not None:
            weights = weights[order]
            if np.any(~np.isfinite(weights)) or np.any(weights <= 0) or np.any(weights > 1):
                raise ValueError("edge weights must lie in (0, 1]")
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != n or X.shape[1] < 1:
            raise ValueError(f"features must be {n} x d with d >= 1, got {X.shape}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "weights", None if weights is None else _frozen(weights))
        object.__setattr__(self, "features", _frozen(X))

    @classmethod
    def from_dense(cls, A: np.ndarray, X: np.ndarray) -> "Graph":
        """Build from a symmetric dense adjacency; entries equal to 1 stay unweighted."""
        A = np.asarray(A, dtype=np.float64)
        iu, ju = np.nonzero(np.triu(A, 1))
        w = A[iu, ju]
        weights = None if np.all(w == 1.0) else w
        return cls(A.shape[0], np.stack([iu, ju], axis=1), X, weights)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.weights is None or bool(np.all(self.weights == 1.0))

    def edge_weights(self) -> np.ndarray:
        return np.ones(self.m) if self.weights is None else np.asarray(self.weights)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric sparse adjacency (no self-loops)."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = self.edge_weights()
        return sp.csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        )

    def dense_adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = self.edge_weights()
        A[i, j] = w
        A[j, i] = w
        return A

    def with_features(self, X: np.ndarray) -> "Graph":
        return Graph(self.n, self.edges, X, self.weights)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if self.n != other.n or not np.array_equal(self.edges, other.edges):
            return False
        if not np.array_equal(self.features, other.features):
            return False
        return np.array_equal(self.edge_weights(), other.edge_weights())

    __hash__ = None

    def content_hash(self) -> str:
        """Git-style blob SHA-1 of the canonical edge and feature text."""
        lines = []
        w = self.edge_weights()
        for (i, j), wij in zip(self.edges.tolist(), w.tolist()):
            lines.append(f"{i}\t{j}\t{fmt_number(wij)}")
        lines.append("#features")
        for row in self.features.tolist():
            lines.append("\t".join(fmt_number(v) for v in row))
        payload = ("\n".join(lines) + "\n").encode()
        return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Per-node labels (``UNLABELED`` = -1), labeled pool Z and test set W."""

    classes: int
    label: np.ndarray
    train_pool: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        label = np.asarray(self.label, dtype=np.int64).ravel()
        Z = np.unique(np.asarray(self.train_pool, dtype=np.int64))
        W = np.unique(np.asarray(self.test, dtype=np.int64))
        c = int(self.classes)
        if c < 2:
            raise ValueError("need at least two classes")
        if np.any(label < UNLABELED) or np.any(label >= c):
            raise ValueError(f"labels must be -1 or in [0, {c})")
        if len(Z) != len(np.asarray(self.train_pool).ravel()) or len(W) != len(np.asarray(self.test).ravel()):
            raise ValueError("duplicate node in Z or W")
        n = len(label)
        for name, s in (("Z", Z), ("W", W)):
            if len(s) and (s.min() < 0 or s.max() >= n):
                raise ValueError(f"{name} index out of range")
            if np.any(label[s] == UNLABELED):
                raise ValueError(f"every node in {name} must be labeled")
        if np.intersect1d(Z, W).size:
            raise ValueError("Z and W overlap")
        missing = set(range(c)) - set(label[Z].tolist())
        if missing:
            raise ValueError(f"classes {sorted(missing)} have no node in Z")
        object.__setattr__(self, "classes", c)
        object.__setattr__(self, "label", _frozen(label))
        object.__setattr__(self, "train_pool", _frozen(Z))
        object.__setattr__(self, "test", _frozen(W))

    @property
    def n(self) -> int:
        return len(self.label)

    def with_labels(self, label: np.ndarray) -> "LabelSet":
        return LabelSet(self.classes, label, self.train_pool, self.test)

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return (
            self.classes == other.classes
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.train_pool, other.train_pool)
            and np.array_equal(self.test, other.test)
        )

    __hash__ = None


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[np.ndarray, ...]
    seed: int

    @property
    def K(self) -> int:
        return len(self.folds)

    def split(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(train, valid)`` for fold ``k``; fold ``k`` is the validation set."""
        train = np.concatenate([f for i, f in enumerate(self.folds) if i != k])
        return train, self.folds[k]


def make_folds(labels: LabelSet, K: int, seed: int) -> FoldPlan:
    Z = np.asarray(labels.train_pool)
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > len(Z):
        raise ValueError(f"K={K} exceeds the labeled pool size {len(Z)}")
    perm = np.random.default_rng(seed).permutation(Z)
    folds = tuple(_frozen(f) for f in np.array_split(perm, K))
    return FoldPlan(folds=folds, seed=seed)


@dataclass(frozen=True, eq=False)
class NormAdj:
    """D^-1/2 (A + I) D^-1/2 as a sparse symmetric operator.

    ``inv_sqrt_deg`` and ``raw`` (A + I) are kept for the chain rule back to A.
    """

    matrix: sp.csr_matrix
    inv_sqrt_deg: np.ndarray
    raw: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def T(self):
        return self

    def __matmul__(self, other):
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(g: Graph) -> NormAdj:
    raw = (g.adjacency() + sp.identity(g.n, format="csr")).tocoo()
    deg = np.asarray(raw.sum(axis=1)).ravel()
    s = 1.0 / np.sqrt(deg)
    # s_i * s_j is commutative, so mirrored entries come out bit-identical
    vals = raw.data * (s[raw.row] * s[raw.col])
    mat = sp.csr_matrix((vals, (raw.row, raw.col)), shape=raw.shape)
    return NormAdj(matrix=mat, inv_sqrt_deg=s, raw=raw.tocsr())


# --------------------------------------------------------------------------
# directory format


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip():
                yield lineno, line.split()


def _default_split(label: np.ndarray, classes: int, per_class: int, seed: int):
    rng = np.random.default_rng(seed)
    Z, W = [], []
    for c in range(classes):
        members = np.flatnonzero(label == c)
        members = rng.permutation(members)
        take = min(per_class, len(members))
        Z.extend(members[:take].tolist())
        W.extend(members[take:].tolist())
    return np.array(Z, dtype=np.int64), np.array(W, dtype=np.int64)


def load_graph(
    directory, classes: int | None = None, per_class: int = 20, split_seed: int = 0
) -> tuple[Graph, LabelSet]:
    """Read a graph directory (edges.tsv, labels.tsv, optional features.tsv and splits.tsv).

    Without splits.tsv the labeled pool takes ``per_class`` random nodes of each
    class and every other labeled node becomes a test node.
    """
    directory = Path(directory)
    labels_path = directory / "labels.tsv"
    edges_path = directory / "edges.tsv"
    for p in (labels_path, edges_path):
        if not p.exists():
            raise GraphFormatError(str(p), None, "file not found")

    label = []
    for lineno, tok in _read_lines(labels_path):
        if len(tok) != 1:
            raise GraphFormatError(str(labels_path), lineno, "expected one integer")
        try:
            label.append(int(tok[0]))
        except ValueError:
            raise GraphFormatError(str(labels_path), lineno, f"not an integer: {tok[0]!r}") from None
        if label[-1] < UNLABELED:
            raise GraphFormatError(str(labels_path), lineno, f"invalid label {label[-1]}")
    n = len(label)
    if n == 0:
        raise GraphFormatError(str(labels_path), None, "no nodes")
    label = np.array(label, dtype=np.int64)
    c = int(label.max()) + 1 if classes is None else int(classes)
    bad = np.flatnonzero(label >= c)
    if bad.size:
        raise GraphFormatError(str(labels_path), int(bad[0]) + 1, f"label {label[bad[0]]} >= classes {c}")

    pairs, weights, seen = [], [], set()
    weighted = False
    for lineno, tok in _read_lines(edges_path):
        if len(tok) not in (2, 3):
            raise GraphFormatError(str(edges_path), lineno, "expected 'i j' or 'i j weight'")
        try:
            i, j = int(tok[0]), int(tok[1])
            w = float(tok[2]) if len(tok) == 3 else 1.0
        except ValueError:
            raise GraphFormatError(str(edges_path), lineno, "malformed number") from None
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(str(edges_path), lineno, f"index out of range for n={n}")
        if i == j:
            raise GraphFormatError(str(edges_path), lineno, f"self-loop at node {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise GraphFormatError(str(edges_path), lineno, f"duplicate edge {key}")
        if not (0 < w <= 1):
            raise GraphFormatError(str(edges_path), lineno, f"weight {w} outside (0, 1]")
        seen.add(key)
        pairs.append(key)
        weights.append(w)
        weighted |= len(tok) == 3

    feat_path = directory / "features.tsv"
    if feat_path.exists():
        rows = []
        for lineno, tok in _read_lines(feat_path):
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise GraphFormatError(str(feat_path), lineno, "malformed number") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(str(feat_path), lineno, "ragged feature row")
        if len(rows) != n:
            raise GraphFormatError(str(feat_path), None, f"expected {n} rows, found {len(rows)}")
        X = np.array(rows, dtype=np.float64)
    else:
        X = np.eye(n)

    split_path = directory / "splits.tsv"
    if split_path.exists():
        Z, W = [], []
        count = 0
        for lineno, tok in _read_lines(split_path):
            if len(tok) != 1 or tok[0] not in SPLIT_TOKENS:
                raise GraphFormatError(str(split_path), lineno, f"expected one of {SPLIT_TOKENS}")
            node = count
            count += 1
            if tok[0] != "NONE" and label[node] == UNLABELED:
                raise GraphFormatError(str(split_path), lineno, "split assigned to an unlabeled node")
            if tok[0] == "TRAIN-POOL":
                Z.append(node)
            elif tok[0] == "TEST":
                W.append(node)
        if count != n:
            raise GraphFormatError(str(split_path), None, f"expected {n} rows, found {count}")
    else:
        Z, W = _default_split(label, c, per_class, split_seed)

    graph = Graph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), X, np.array(weights) if weighted else None)
    try:
        labels = LabelSet(c, label, Z, W)
    except ValueError as exc:
        raise GraphFormatError(str(directory), None, str(exc)) from None
    return graph, labels


def graph_delta(g: Graph, base: Graph) -> list[tuple]:
    """Changed adjacency pairs and feature entries as ``(kind, i, j, old, new)`` tuples."""
    if g.n != base.n or g.features.shape != base.features.shape:
        raise ValueError("delta requires graphs of identical shape")
    old = {tuple(e): w for e, w in zip(base.edges.tolist(), base.edge_weights().tolist())}
    new = {tuple(e): w for e, w in zip(g.edges.tolist(), g.edge_weights().tolist())}
    rows = []
    for key in sorted(old.keys() | new.keys()):
        a, b = old.get(key, 0.0), new.get(key, 0.0)
        if a != b:
            rows.append(("A", key[0], key[1], a, b))
    for i, k in zip(*np.nonzero(g.features != base.features)):
        rows.append(("X", int(i), int(k), float(base.features[i, k]), float(g.features[i, k])))
    return rows


def save_graph(g: Graph, labels: LabelSet, directory, delta_against: Graph | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        if g.weights is None:
            for i, j in g.edges.tolist():
                fh.write(f"{i}\t{j}\n")
        else:
            for (i, j), w in zip(g.edges.tolist(), g.weights.tolist()):
                fh.write(f"{i}\t{j}\t{fmt_number(w)}\n")
    with open(directory / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for row in g.features.tolist():
            fh.write("\t".join(fmt_number(v) for v in row) + "\n")
    with open(directory / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{v}\n" for v in labels.label.tolist()))
    split = np.full(labels.n, "NONE", dtype=object)
    split[labels.train_pool] = "TRAIN-POOL"
    split[labels.test] = "TEST"
    with open(directory / "splits.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{s}\n" for s in split))
    if delta_against is not None:
        write_delta(graph_delta(g, delta_against), directory / "delta.tsv")


def write_delta(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for kind, i, j, a, b in rows:
            fh.write(f"{kind} {i} {j} {fmt_number(a)} {fmt_number(b)}\n")
