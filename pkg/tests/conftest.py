import os
import sys

import numpy as np
import pytest

from gram.meta_graph import MetaGraphConfig, init_meta_graph

sys.path.insert(0, os.path.dirname(__file__))

# planted 5-edge motif on one n=8 DAG (k, i, j)
MOTIF = [(0, 0, 1), (0, 1, 3), (0, 3, 5), (0, 5, 7), (0, 0, 4)]


def random_meta(seed, h=2, m=2, n=6):
    """Meta-graph with spread, max-normalized random weights."""
    meta = init_meta_graph(MetaGraphConfig(h=h, m=m, n=n, seed=seed))
    rng = np.random.default_rng(seed)
    for dag in meta.dags:
        w = rng.uniform(0.0, 1.0, dag.log_weights.shape[0])
        w[rng.integers(w.shape[0])] = 1.0
        dag.set_weights(w)
    return meta


@pytest.fixture
def small_meta():
    return random_meta(0)
