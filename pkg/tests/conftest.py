import numpy as np
import pytest

from cld.cvxprog import ConvexProblem
from cld.dataio import LabelSet
from cld.gates import sample_gates
from cld.linops import GatedOperator


def random_problem(n=20, d=4, K=2, P=4, beta=1e-3, seed=0, penalty_kind="l21"):
    """Small relaxed training instance with random labels."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, K, size=n)
    y[:K] = np.arange(K)  # every class present
    Y = np.eye(K)[y]
    gates = sample_gates(X, P, seed=seed)
    op = GatedOperator.relaxed(X, gates, K)
    return ConvexProblem(op, Y, beta, penalty_kind, "relaxed", ())


def cluster_data(n=100, d=8, K=2, separation=4.0, seed=0):
    """Linearly separable Gaussian clusters (one center per class)."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((K, d))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    per = n // K
    rows, ids = [], []
    for k in range(K):
        rows.append(centers[k] + rng.standard_normal((per, d)))
        ids.append(np.full(per, k))
    X = np.vstack(rows)
    y = np.concatenate(ids)
    label_map = {f"lang{k}": k for k in range(K)}
    return X, LabelSet(y, label_map), centers


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
