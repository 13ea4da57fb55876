"""Label grid on the open unit interval and the quadrature built on it.

Every integral over labels in the package goes through `integrate_labels`
or `kernel_apply`, so the whole library shares one quadrature rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class LabelGrid:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size == 0:
            raise ShapeError("nodes and weights must be equal-length 1-d arrays")
        if np.any(nodes <= 0.0) or np.any(nodes >= 1.0):
            raise ValueError("nodes must lie strictly inside (0, 1)")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(weights <= 0.0) or abs(weights.sum() - 1.0) > 1e-14:
            raise ValueError("weights must be positive and sum to one")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def n_labels(self) -> int:
        return self.nodes.size

    def __len__(self) -> int:
        return self.nodes.size


def make_uniform_grid(n: int) -> LabelGrid:
    """Midpoint grid u_i = (i + 1/2)/n with equal weights 1/n."""
    if int(n) != n or n < 1:
        raise ValueError(f"number of labels must be a positive integer, got {n!r}")
    n = int(n)
    nodes = (np.arange(n) + 0.5) / n
    return LabelGrid(nodes, np.full(n, 1.0 / n))


def integrate_labels(grid: LabelGrid, values) -> np.ndarray:
    """Quadrature sum over the leading (label) axis."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[0] != grid.n_labels:
        raise ShapeError(
            f"expected leading axis of length {grid.n_labels}, got shape {values.shape}"
        )
    return np.tensordot(grid.weights, values, axes=(0, 0))


def kernel_apply(grid: LabelGrid, G, m) -> np.ndarray:
    """out_i = sum_j w_j G(u_i, u_j) m_j.

    G has shape (n, n), (n, n, p, q); m has shape (n,) or (n, q).
    A scalar kernel acting on vector fields is applied entrywise.
    """
    G = np.asarray(G, dtype=float)
    m = np.asarray(m, dtype=float)
    n = grid.n_labels
    if G.shape[:2] != (n, n):
        raise ShapeError(f"kernel must start with shape ({n}, {n}), got {G.shape}")
    if m.shape[:1] != (n,):
        raise ShapeError(f"field must start with length {n}, got {m.shape}")
    w = grid.weights
    if G.ndim == 2:
        if m.ndim == 1:
            return np.einsum("ij,j,j->i", G, w, m)
        return np.einsum("ij,j,j...->i...", G, w, m)
    if G.ndim == 4 and m.ndim == 2:
        if G.shape[3] != m.shape[1]:
            raise ShapeError(f"kernel block {G.shape[2:]} cannot act on vectors of size {m.shape[1]}")
        return np.einsum("ijab,j,jb->ia", G, w, m)
    raise ShapeError(f"unsupported kernel/field shapes {G.shape} and {m.shape}")
