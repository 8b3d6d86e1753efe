"""Shared checks used by several test modules."""
from __future__ import annotations

import numpy as np

from emagnn import autodiff as ad
from emagnn.graphs import Graph, build_random
from emagnn.models import ModelConfig, build_model

from oracles import central_diff, rel_error


def tiny_model(family: str, seed: int, V: int = 4, L: int = 2, hidden: int = 4, dropout: float = 0.0):
    config = ModelConfig(family=family, hidden=hidden, seq_len=L, dropout=dropout, embed_dim=3, topk=3)
    graph = None if family == "LSTM" else build_random(V, 0.7, seed=seed)
    return build_model(config, V, graph, seed=seed)


def model_grad_error(model, X: np.ndarray, Y: np.ndarray, h: float = 1e-6) -> float:
    """Worst relative error between autodiff and central differences over all parameters.

    ``h`` is kept small because the learned adjacency has relu kinks; a
    pre-activation within a few ``h`` of zero makes the stencil straddle it.
    """
    def loss() -> ad.Tensor:
        return ad.mse_loss(model.forward(X, training=False), Y)

    for p in model.parameters():
        p.grad = None
    loss().backward()
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(values):
            p.data = values
            try:
                return loss().item()
            finally:
                p.data = original

        numeric = central_diff(f, original, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def permuted_graph(g: Graph, perm: np.ndarray) -> Graph:
    return Graph(g.weights[np.ix_(perm, perm)], g.metric, g.gdt, g.seed)
