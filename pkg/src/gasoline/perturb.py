"""Synthetic test beds: planted-partition graphs, random edge-flip attacks and the score audit."""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import BudgetError, DataError
from .graph import Graph, LabelSet
from .sanitizer import floor_product


@dataclass(frozen=True)
class AttackRecord:
    """Flipped unordered pairs as ``(i, j, "added" | "removed")`` with ``i < j``."""

    flips: tuple[tuple[int, int, str], ...]
    seed: int | None = None
    rate: float | None = None

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, j, _ in self.flips]


def _decode_pairs(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map row-major indices of the strict upper triangle back to ``(i, j)``."""
    idx = np.asarray(idx, dtype=np.int64)
    b = 2 * n - 1
    i = np.floor((b - np.sqrt(b * b - 8.0 * idx)) / 2).astype(np.int64)
    offset = lambda r: r * (2 * n - r - 1) // 2
    i = np.where(offset(i) > idx, i - 1, i)
    i = np.where(offset(i + 1) <= idx, i + 1, i)
    j = idx - offset(i) + i + 1
    return i, j


def toggle_pairs(g: Graph, pairs) -> Graph:
    if not g.is_binary:
        raise DataError("edge flips need an unweighted graph")
    edges = set(map(tuple, g.edges.tolist()))
    for i, j in pairs:
        key = (min(i, j), max(i, j))
        if key in edges:
            edges.remove(key)
        else:
            edges.add(key)
    arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return Graph(g.n, arr, g.features)


def random_attack(g: Graph, rate: float, seed: int) -> tuple[Graph, AttackRecord]:
    """Toggle ``floor(m * rate)`` distinct node pairs drawn uniformly from all pairs."""
    if not g.is_binary:
        raise DataError("random attack needs an unweighted graph")
    if rate <= 0:
        raise BudgetError("attack rate must be positive")
    B = floor_product(g.m, rate)
    total = g.n * (g.n - 1) // 2
    if B < 1:
        raise BudgetError(f"rate {rate} on {g.m} edges gives an empty attack")
    if B > total:
        raise BudgetError(f"attack budget {B} exceeds the {total} available pairs")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=B, replace=False))
    ii, jj = _decode_pairs(chosen, g.n)
    existing = set(map(tuple, g.edges.tolist()))
    flips = tuple(
        (i, j, "removed" if (i, j) in existing else "added") for i, j in zip(ii.tolist(), jj.tolist())
    )
    poisoned = toggle_pairs(g, [(i, j) for i, j, _ in flips])
    return poisoned, AttackRecord(flips=flips, seed=seed, rate=rate)


def undo_attack(poisoned: Graph, record: AttackRecord) -> Graph:
    return toggle_pairs(poisoned, record.pairs)


def write_attack(record: AttackRecord, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j, kind in record.flips:
            fh.write(f"{i} {j} {kind}\n")


def read_attack(path) -> AttackRecord:
    flips = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 3 or tok[2] not in ("added", "removed"):
                raise DataError(f"{path}:{lineno}: expected 'i j added|removed'")
            i, j = int(tok[0]), int(tok[1])
            flips.append((min(i, j), max(i, j), tok[2]))
    return AttackRecord(flips=tuple(flips))


def sbm_generate(
    n: int,
    blocks: int,
    p_in: float,
    p_out: float,
    labels_per_class: int,
    feature_dim: int,
    feature_noise: float,
    seed: int,
    test_fraction: float = 0.3,
) -> tuple[Graph, LabelSet]:
    """Planted-partition graph with contiguous equal blocks; the block id is the class label.

    Features are the block one-hot tiled to ``feature_dim`` columns plus
    Gaussian noise of scale ``feature_noise``. Z holds ``labels_per_class``
    random nodes per block and W a ``test_fraction`` share of the rest.
    """
    if blocks < 2 or n % blocks:
        raise ValueError("n must be a positive multiple of blocks >= 2")
    if not (0 <= p_out < p_in <= 1):
        raise ValueError("need 0 <= p_out < p_in <= 1")
    size = n // blocks
    if not (1 <= labels_per_class <= size):
        raise ValueError("labels_per_class must lie in [1, n / blocks]")
    if feature_dim < 1 or feature_noise < 0:
        raise ValueError("feature_dim must be >= 1 and feature_noise >= 0")
    rng = np.random.default_rng(seed)
    block = np.arange(n) // size
    iu, ju = np.triu_indices(n, 1)
    p = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    signature = (np.arange(feature_dim)[None, :] % blocks == np.arange(blocks)[:, None]).astype(float)
    X = signature[block] + feature_noise * rng.standard_normal((n, feature_dim))

    Z = np.concatenate([rng.choice(np.flatnonzero(block == b), labels_per_class, replace=False) for b in range(blocks)])
    rest = np.setdiff1d(np.arange(n), Z)
    W = rng.choice(rest, size=int(round(test_fraction * len(rest))), replace=False)
    return Graph(n, edges, X), LabelSet(blocks, block, Z, W)


def sbm_expected_edges(n: int, blocks: int, p_in: float, p_out: float) -> float:
    s = n // blocks
    return blocks * s * (s - 1) / 2 * p_in + blocks * (blocks - 1) / 2 * s * s * p_out


@dataclass(frozen=True)
class AuditScores:
    adv: float
    benign_existing: float
    benign_nonexisting: float
    counts: tuple[int, int, int] = field(default=(0, 0, 0))


def score_audit(benign: Graph, poisoned: Graph, S: np.ndarray) -> AuditScores:
    """Mean score of poisoned entries, untouched edges and untouched non-edges (off-diagonal)."""
    if benign.n != poisoned.n:
        raise DataError("benign and poisoned graphs differ in size")
    A = benign.dense_adjacency()
    diff = np.abs(poisoned.dense_adjacency() - A)
    off = 1.0 - np.eye(benign.n)
    masks = [diff * off, A * (1 - diff) * off, (1 - A) * (1 - diff) * off]
    counts = [m.sum() for m in masks]
    if counts[0] == 0:
        raise DataError("no poisoned entries: benign and poisoned graphs are identical")
    S = np.where(off > 0, np.asarray(S, dtype=np.float64), 0.0)
    means = [float((S * m).sum() / cnt) if cnt else float("nan") for m, cnt in zip(masks, counts)]
    return AuditScores(*means, counts=tuple(int(c) for c in counts))
