import numpy as np
import pytest
import scipy.sparse as sp

from gasoline.diffnet import ce_loss, forward, normalize_raw
from gasoline.graph import Graph, LabelSet


def dense_norm(A):
    """Reference normalization D^-1/2 (A + I) D^-1/2 on a dense matrix."""
    M = np.asarray(A, dtype=float) + np.eye(len(A))
    s = M.sum(axis=1) ** -0.5
    return M * s[:, None] * s[None, :]


def central_fd(fn, x, h=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def assert_close_fd(analytic, numeric, rtol=1e-4, atol=1e-8):
    err = np.abs(analytic - numeric)
    bad = err > atol + rtol * np.abs(numeric)
    assert not bad.any(), f"max abs err {err.max():.3e} at {np.argwhere(bad)[:3].tolist()}"


def random_dense(n, p=0.3, d=4, c=3, seed=0):
    rng = np.random.default_rng(seed)
    A = np.triu((rng.random((n, n)) < p).astype(float), 1)
    A = A + A.T
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    y[:c] = np.arange(c)
    return A, X, y, rng


def loss_on_dense(kind, A, X, W, y, nodes):
    P, _ = normalize_raw(sp.csr_matrix(A + np.eye(len(A))))
    return ce_loss(forward(kind, P, X, W), y, nodes)


def labelset(y, Z, W, c=None):
    y = np.asarray(y)
    return LabelSet(int(c or y.max() + 1), y, np.asarray(Z), np.asarray(W))


@pytest.fixture
def path_graph():
    return Graph(3, np.array([[0, 1], [1, 2]]), np.eye(3))


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
