"""Layer-wise propagation over the normalized bipartite adjacency."""
from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .errors import ConfigError


@dataclass
class StructuralEmbeddings:
    layers: list[dc.Var]
    e_mu: dc.Var


def propagate(adj: dc.SparseMat, e0: dc.Var, num_layers: int,
              include_layer0: bool = True) -> StructuralEmbeddings:
    """E^(l) = A_hat E^(l-1); pooled output is the plain sum of the layers."""
    if num_layers < 0:
        raise ConfigError(f"layers must be >= 0, got {num_layers}")
    if e0.shape[0] != adj.shape[0]:
        raise ConfigError(f"embedding rows {e0.shape[0]} != graph nodes {adj.shape[0]}")
    layers = [e0]
    for _ in range(num_layers):
        layers.append(dc.sp_dense_matmul(adj, layers[-1]))
    pooled = layers if include_layer0 or num_layers == 0 else layers[1:]
    e_mu = pooled[0]
    for x in pooled[1:]:
        e_mu = e_mu + x
    return StructuralEmbeddings(layers, e_mu)
