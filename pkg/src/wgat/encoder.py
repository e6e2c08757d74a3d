"""Graph encoders that propagate Gaussian embeddings over the interaction graph.

Two encoders share the same layer-averaging scheme:

* ``wgat_forward``: attention weights are a softmax over neighbours of the
  negative W2 distance between layer-0 embeddings. Means move through the
  attention matrix once per layer; variances move through it twice per layer
  (rule ``"a2"``) so a user's variance only ever mixes with other users'
  variances, or once per layer (rule ``"a1"``).
* ``lightgcn_gauss_forward``: fixed symmetric normalisation 1/sqrt(d_u d_i)
  applied to means and variances alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .gauss import VARIANCE_FLOOR
from .graph import InteractionGraph

VARIANCE_RULES = ("a2", "a1")


@dataclass
class AttentionMatrix:
    graph: InteractionGraph
    weights: ad.Node  # one value per stored entry of graph.indptr / graph.indices

    @property
    def values(self) -> np.ndarray:
        return self.weights.value

    def to_scipy(self) -> sp.csr_matrix:
        g = self.graph
        return sp.csr_matrix((self.values, g.indices, g.indptr), shape=(g.num_nodes, g.num_nodes))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.graph.entry_rows, weights=self.values,
                           minlength=self.graph.num_nodes)


@dataclass
class LayerStack:
    means: list
    variances: list
    mean: ad.Node
    variance: ad.Node


def compute_attention(mean0: ad.Node, var0: ad.Node, graph: InteractionGraph) -> AttentionMatrix:
    src, dst = graph.edge_nodes
    dist = ad.edge_w2(mean0, var0, src, dst)
    # each undirected distance feeds both directed entries
    logits = -ad.take(dist, graph.entry_edge)
    return AttentionMatrix(graph, ad.segment_softmax(logits, graph.indptr))


def _propagate(weights, x: ad.Node, graph: InteractionGraph) -> ad.Node:
    return ad.sparse_matmul(weights, x, graph.indptr, graph.indices, graph.transpose_perm,
                            passthrough=graph.isolated)


def wgat_forward(mean0: ad.Node, var0: ad.Node, graph: InteractionGraph, layers: int,
                 variance_rule: str = "a2", attention: AttentionMatrix | None = None) -> LayerStack:
    if layers < 0:
        raise ValueError("layer count must be >= 0")
    if variance_rule not in VARIANCE_RULES:
        raise ValueError(f"unknown variance rule {variance_rule!r}; expected one of {VARIANCE_RULES}")
    if attention is None:
        attention = compute_attention(mean0, var0, graph)
    w = attention.weights
    means, variances = [mean0], [var0]
    for _ in range(layers):
        means.append(_propagate(w, means[-1], graph))
        v = _propagate(w, variances[-1], graph)
        if variance_rule == "a2":
            v = _propagate(w, v, graph)
        variances.append(v)
    return LayerStack(means, variances, ad.average(means), ad.average(variances))


def lightgcn_coefficients(graph: InteractionGraph) -> np.ndarray:
    deg = graph.degrees.astype(np.float64)
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return inv[graph.entry_rows] * inv[graph.indices]


def lightgcn_gauss_forward(mean0: ad.Node, var0: ad.Node, graph: InteractionGraph,
                           layers: int) -> LayerStack:
    if layers < 0:
        raise ValueError("layer count must be >= 0")
    coef = lightgcn_coefficients(graph)
    means, variances = [mean0], [var0]
    for _ in range(layers):
        means.append(_propagate(coef, means[-1], graph))
        variances.append(_propagate(coef, variances[-1], graph))
    variance = ad.clip_min(ad.average(variances), VARIANCE_FLOOR)
    return LayerStack(means, variances, ad.average(means), variance)


def encode(mean0: ad.Node, var0: ad.Node, graph: InteractionGraph, layers: int,
           encoder: str = "wgat", variance_rule: str = "a2") -> LayerStack:
    if encoder == "wgat":
        return wgat_forward(mean0, var0, graph, layers, variance_rule)
    if encoder == "lightgcn_gauss":
        return lightgcn_gauss_forward(mean0, var0, graph, layers)
    raise ValueError(f"unknown encoder {encoder!r}")
