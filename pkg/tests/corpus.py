"""Seeded problem generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from gls.modeling import WeightedGraph


def random_connected_graph(rng, n: int, max_value: int = 10, density: float = 0.3) -> WeightedGraph:
    """Random spanning tree plus extra edges, integer values in ``[1, max_value]``."""
    order = rng.permutation(n)
    edges = []
    for i in range(1, n):
        u, v = int(order[i]), int(order[rng.integers(i)])
        edges.append((u, v, int(rng.integers(1, max_value + 1))))
    present = {frozenset(e[:2]) for e in edges}
    for u in range(n):
        for v in range(u + 1, n):
            if frozenset((u, v)) not in present and rng.random() < density:
                edges.append((u, v, int(rng.integers(1, max_value + 1))))
    return WeightedGraph(n, edges)


def graph_case(seed: int, max_n: int):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_n + 1))
    g = random_connected_graph(rng, n)
    s, t = (int(v) for v in rng.choice(n, size=2, replace=False))
    return g, s, t
