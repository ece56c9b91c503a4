"""Gauss-Hermite rules against the standard normal density."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import BadNodeCount


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights with ``sum(w * f(x)) ~= E[f(Z)]``, ``Z ~ N(0, 1)``."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def integrate(self, f) -> float:
        return float(np.sum(self.weights * f(self.nodes)))


@lru_cache(maxsize=64)
def gh_rule(k: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with ``k`` nodes (1 <= k <= 50)."""
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or not 1 <= k <= 50:
        raise BadNodeCount(f"node count must be an integer in [1, 50], got {k!r}")
    x, w = hermegauss(int(k))
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w)


@lru_cache(maxsize=64)
def tensor_rule(k: int, dim: int):
    """Tensor-product rule in ``dim`` dimensions.

    Returns ``(nodes, log_weights)`` with shapes ``(k**dim, dim)`` and
    ``(k**dim,)``. ``dim == 0`` gives a single empty node with weight one.
    """
    rule = gh_rule(k)
    if dim == 0:
        return np.zeros((1, 0)), np.zeros(1)
    idx = np.array(list(itertools.product(range(k), repeat=dim)))
    nodes = rule.nodes[idx]
    logw = np.log(rule.weights)[idx].sum(axis=1)
    nodes.setflags(write=False)
    logw.setflags(write=False)
    return nodes, logw
