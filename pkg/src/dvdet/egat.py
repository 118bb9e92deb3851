"""Edge-aware graph attention over importance-weighted code graphs.

Attention logits are ``LeakyReLU(a . (W x_i + W x_j) * s_ij)``, normalised
over each node's neighbourhood plus a self-loop, and node outputs are
``ELU(sum_j att_ij W x_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from dvdet.errors import DomainError
from dvdet.nn import DTYPE, ParamStore, dropout_mask, elu, glorot_uniform, leaky_relu

DEFAULT_DIMS = (768, 256, 256, 128)
LEAKY_SLOPE = 0.2


class AttentionGraph(Protocol):
    n_nodes: int

    def attention_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(target rows, neighbour cols, edge weights), self-loops included."""
        ...


@dataclass
class EgatLayerParams:
    W: np.ndarray  # in_dim x out_dim
    a: np.ndarray  # out_dim
    slope: float = LEAKY_SLOPE


@dataclass
class _LayerCache:
    X: np.ndarray
    H: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    s: np.ndarray
    pre: np.ndarray
    att: np.ndarray
    agg: np.ndarray
    slope: float


def _check(graph: AttentionGraph, X: np.ndarray, W: np.ndarray, a: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] != graph.n_nodes:
        raise DomainError(f"feature matrix {X.shape} does not match {graph.n_nodes} nodes")
    if W.shape[0] != X.shape[1]:
        raise DomainError(f"W has {W.shape[0]} input rows, features have width {X.shape[1]}")
    if a.shape != (W.shape[1],):
        raise DomainError(f"attention vector shape {a.shape} does not match output width {W.shape[1]}")


def _segment_softmax(e: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    top = np.full(n, -np.inf)
    np.maximum.at(top, rows, e)
    ex = np.exp(e - top[rows])
    den = np.bincount(rows, weights=ex, minlength=n)
    return ex / den[rows]


def layer_forward(
    graph: AttentionGraph, X: np.ndarray, W: np.ndarray, a: np.ndarray, slope: float = LEAKY_SLOPE
) -> tuple[np.ndarray, _LayerCache]:
    _check(graph, X, W, a)
    rows, cols, s = graph.attention_pairs()
    n = graph.n_nodes
    H = X @ W
    f = H @ a
    pre = (f[rows] + f[cols]) * s
    att = _segment_softmax(leaky_relu(pre, slope), rows, n)
    agg = np.zeros_like(H)
    np.add.at(agg, rows, att[:, None] * H[cols])
    return elu(agg), _LayerCache(X, H, rows, cols, s, pre, att, agg, slope)


def layer_backward(
    cache: _LayerCache, W: np.ndarray, a: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dX, dW, da) for one layer."""
    c = cache
    n = c.H.shape[0]
    dagg = dout * np.where(c.agg > 0, 1.0, np.exp(np.minimum(c.agg, 0.0)))
    datt = np.einsum("ij,ij->i", dagg[c.rows], c.H[c.cols])
    dH = np.zeros_like(c.H)
    np.add.at(dH, c.cols, c.att[:, None] * dagg[c.rows])
    weighted = np.bincount(c.rows, weights=c.att * datt, minlength=n)
    de = c.att * (datt - weighted[c.rows])
    dpre = de * np.where(c.pre > 0, 1.0, c.slope)
    ds = dpre * c.s
    df = np.bincount(c.rows, weights=ds, minlength=n) + np.bincount(c.cols, weights=ds, minlength=n)
    dH += np.outer(df, a)
    da = c.H.T @ df
    dW = c.X.T @ dH
    dX = dH @ W.T
    return dX, dW, da


def attention_weights(graph: AttentionGraph, X: np.ndarray, params: EgatLayerParams) -> np.ndarray:
    """Per-pair attention coefficients, ordered as ``graph.attention_pairs()``."""
    _, cache = layer_forward(graph, X, params.W, params.a, params.slope)
    return cache.att


def egat_layer(graph: AttentionGraph, X: np.ndarray, params: EgatLayerParams) -> np.ndarray:
    out, _ = layer_forward(graph, np.asarray(X, dtype=DTYPE), params.W, params.a, params.slope)
    return out


def egat_forward(
    graph: AttentionGraph,
    X: np.ndarray,
    layers: Sequence[EgatLayerParams],
    *,
    training: bool = False,
    dropout: float = 0.5,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Stack of E-GAT layers with dropout between them in training mode."""
    h = np.asarray(X, dtype=DTYPE)
    for i, params in enumerate(layers):
        if params.W.shape[0] != h.shape[1]:
            raise DomainError(f"egat layer {i}: expects width {params.W.shape[0]}, got {h.shape[1]}")
        if i > 0:
            h = h * dropout_mask(h.shape, dropout, rng, training)
        h = egat_layer(graph, h, params)
    return h


def graph_readout(X: np.ndarray) -> np.ndarray:
    """Mean over node rows."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("readout of an empty graph")
    return X.mean(axis=0)


class Egat:
    """E-GAT encoder whose parameters live in a :class:`ParamStore`."""

    def __init__(
        self,
        dims: Sequence[int] = DEFAULT_DIMS,
        *,
        slope: float = LEAKY_SLOPE,
        dropout: float = 0.5,
        prefix: str = "egat",
    ) -> None:
        if len(dims) < 2:
            raise DomainError("need at least an input and an output width")
        self.dims = tuple(int(d) for d in dims)
        self.slope = slope
        self.dropout = dropout
        self.prefix = prefix

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{i}.{k}" for i in range(len(self.dims) - 1) for k in ("W", "a")]

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for i, (d_in, d_out) in enumerate(zip(self.dims, self.dims[1:])):
            store.add(f"{self.prefix}.{i}.W", glorot_uniform(rng, (d_in, d_out), d_in, d_out))
            store.add(f"{self.prefix}.{i}.a", glorot_uniform(rng, (d_out,), d_out, 1))

    def layers(self, store: ParamStore) -> list[EgatLayerParams]:
        return [
            EgatLayerParams(store.value(f"{self.prefix}.{i}.W"), store.value(f"{self.prefix}.{i}.a"), self.slope)
            for i in range(len(self.dims) - 1)
        ]

    def forward(
        self,
        store: ParamStore,
        graph: AttentionGraph,
        X: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, list]:
        h = np.asarray(X, dtype=DTYPE)
        if h.ndim != 2 or h.shape[1] != self.dims[0]:
            raise DomainError(f"egat input width must be {self.dims[0]}, got {h.shape}")
        caches = []
        for i in range(len(self.dims) - 1):
            mask = None
            if i > 0 and training and self.dropout > 0:
                mask = dropout_mask(h.shape, self.dropout, rng, True)
                h = h * mask
            W = store.value(f"{self.prefix}.{i}.W")
            a = store.value(f"{self.prefix}.{i}.a")
            h, cache = layer_forward(graph, h, W, a, self.slope)
            caches.append((cache, mask))
        return h, caches

    def backward(self, store: ParamStore, caches: list, dout: np.ndarray) -> np.ndarray:
        d = dout
        for i in reversed(range(len(caches))):
            cache, mask = caches[i]
            W = store.value(f"{self.prefix}.{i}.W")
            a = store.value(f"{self.prefix}.{i}.a")
            d, dW, da = layer_backward(cache, W, a, d)
            store.accumulate(f"{self.prefix}.{i}.W", dW)
            store.accumulate(f"{self.prefix}.{i}.a", da)
            if mask is not None:
                d = d * mask
        return d
