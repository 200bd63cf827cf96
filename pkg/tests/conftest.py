import numpy as np
import pytest

from ein.tree import Node, PropagationTree


def tree_from_parents(parents, texts=None, label=0, event_id="e", features=None):
    """Tree straight from a topologically ordered parent list (root parent -1)."""
    texts = texts or [f"post {i}" for i in range(len(parents))]
    nodes = tuple(Node(i, None if p < 0 else p, texts[i]) for i, p in enumerate(parents))
    return PropagationTree(event_id, nodes, label, features)


def random_parents(rng, n, max_depth=8):
    parents, depths, eligible = [-1], [0], [0]
    for i in range(1, n):
        p = eligible[int(rng.integers(len(eligible)))]
        parents.append(p)
        depths.append(depths[p] + 1)
        if depths[i] < max_depth:
            eligible.append(i)
    return parents


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
