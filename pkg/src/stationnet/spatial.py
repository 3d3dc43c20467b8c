"""Multi-graph convolution over a network snapshot.

A layer computes ReLU(sum_g G_g H W) where each G_g is an already
normalized adjacency matrix and W is shared across the graphs. Layer
weights do not depend on the number of stations, so the same parameters
apply as the network grows.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_WIDTH = 64
DEFAULT_LAYERS = 2


class GcnParameters:
    def __init__(self, in_width: int, width: int = DEFAULT_WIDTH, layers: int = DEFAULT_LAYERS,
                 rng: Optional[np.random.Generator] = None, per_graph: int = 0):
        """``per_graph`` > 0 gives each of that many graphs its own weight matrix."""
        self.in_width = in_width
        self.width = width
        self.per_graph = per_graph
        self.weights: List[List[Tensor]] = []
        prev = in_width
        for layer in range(layers):
            copies = per_graph or 1
            mats = []
            for g in range(copies):
                if rng is None:
                    w = np.zeros((prev, width))
                else:
                    bound = np.sqrt(6.0 / (prev + width))
                    w = rng.uniform(-bound, bound, (prev, width))
                suffix = f".g{g}" if per_graph else ""
                mats.append(Tensor(w, requires_grad=True, name=f"gcn.{layer}.w{suffix}"))
            self.weights.append(mats)
            prev = width

    @property
    def out_width(self) -> int:
        return self.width if self.weights else self.in_width

    def tensors(self) -> List[Tensor]:
        return [w for mats in self.weights for w in mats]


def _graph_tensor(g) -> Tensor:
    return g if isinstance(g, Tensor) else Tensor(g)


def multigraph_conv_layer(h_prev: Tensor, graphs: Sequence, weight) -> Tensor:
    """ReLU of the graph-summed propagation ``sum_g G_g @ h_prev @ W``.

    ``weight`` is one shared matrix, or a list with one matrix per graph.
    """
    n = h_prev.shape[0]
    graphs = [_graph_tensor(g) for g in graphs]
    for g in graphs:
        if g.shape != (n, n):
            raise ad.ShapeError(f"graph of shape {g.shape} does not match {n} stations")
    if isinstance(weight, Tensor):
        hw = ad.matmul(h_prev, weight)
        terms = [ad.matmul(g, hw) for g in graphs]
    else:
        if len(weight) != len(graphs):
            raise ValueError(f"{len(weight)} weight matrices for {len(graphs)} graphs")
        terms = [ad.matmul(g, ad.matmul(h_prev, w)) for g, w in zip(graphs, weight)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.relu(total)


def encode_network(h0: Tensor, graphs: Sequence, params: GcnParameters) -> Tensor:
    """Apply every configured layer in order; zero layers pass ``h0`` through."""
    graphs = [_graph_tensor(g) for g in graphs]
    h = h0
    for mats in params.weights:
        h = multigraph_conv_layer(h, graphs, mats[0] if not params.per_graph else mats)
    return h
