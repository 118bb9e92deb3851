"""GRU encoder with attention pooling over opcode sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dvdet.errors import DomainError
from dvdet.nn import DTYPE, ParamStore, dropout_mask, glorot_uniform, sigmoid, softmax

DEFAULT_DIMS = (350, 256, 256)
POOL_MODES = ("mean", "max")


@dataclass
class GruParams:
    """Gate weights act on the concatenation ``[h_prev, x]``."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.b_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1] - self.hidden_dim


@dataclass
class AttentionPoolParams:
    u: np.ndarray


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, params: GruParams) -> np.ndarray:
    H = params.hidden_dim
    if h_prev.shape != (H,) or x_t.shape != (params.input_dim,):
        raise DomainError(f"gru_cell: got x{x_t.shape}, h{h_prev.shape} for hidden {H}, input {params.input_dim}")
    c = np.concatenate([h_prev, x_t])
    z = sigmoid(params.W_z @ c + params.b_z)
    r = sigmoid(params.W_r @ c + params.b_r)
    h_cand = np.tanh(params.W_h @ np.concatenate([r * h_prev, x_t]) + params.b_h)
    return (1.0 - z) * h_prev + z * h_cand


@dataclass
class _ForestCache:
    X: np.ndarray
    parent: np.ndarray  # parent index per node, N for roots (the zero state)
    levels: list[np.ndarray]
    HP: np.ndarray  # previous state per node
    Z: np.ndarray
    R: np.ndarray
    HC: np.ndarray  # candidate state


def _levels(parent: np.ndarray) -> list[np.ndarray]:
    n = parent.size
    depth = np.zeros(n, dtype=np.int64)
    for i in range(n):
        par = parent[i]
        if par >= 0:
            if par >= i:
                raise DomainError("forest nodes must come after their parents")
            depth[i] = depth[par] + 1
    order = np.argsort(depth, kind="stable")
    cuts = np.flatnonzero(np.diff(depth[order])) + 1
    return np.split(order, cuts) if n else []


def gru_forest(X: np.ndarray, parent: np.ndarray, p: GruParams) -> tuple[np.ndarray, _ForestCache]:
    """Run one GRU layer over a forest of sequences sharing prefixes.

    Node i reads input ``X[i]`` and starts from the state of ``parent[i]``
    (a zero state when the parent is -1). Every root-to-node chain therefore
    gets exactly the states it would get as a standalone sequence, while
    shared prefixes are evaluated once.
    """
    H, I = p.hidden_dim, p.input_dim
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] != I:
        raise DomainError(f"gru layer expects input width {I}, got {X.shape}")
    n = X.shape[0]
    parent = np.asarray(parent, dtype=np.int64)
    levels = _levels(parent)
    par = np.where(parent < 0, n, parent)
    Wx = np.vstack([p.W_z[:, H:], p.W_r[:, H:], p.W_h[:, H:]])
    proj = X @ Wx.T + np.concatenate([p.b_z, p.b_r, p.b_h])
    Uzr = np.vstack([p.W_z[:, :H], p.W_r[:, :H]]).T
    Uh = p.W_h[:, :H].T
    S = np.zeros((n + 1, H))
    HP = np.empty((n, H))
    Z = np.empty((n, H))
    R = np.empty((n, H))
    HC = np.empty((n, H))
    for idx in levels:
        hp = S[par[idx]]
        gates = sigmoid(hp @ Uzr + proj[idx, : 2 * H])
        z, r = gates[:, :H], gates[:, H:]
        hc = np.tanh((r * hp) @ Uh + proj[idx, 2 * H :])
        S[idx] = (1.0 - z) * hp + z * hc
        HP[idx], Z[idx], R[idx], HC[idx] = hp, z, r, hc
    return S[:n], _ForestCache(X, par, levels, HP, Z, R, HC)


def gru_forest_backward(c: _ForestCache, p: GruParams, dS: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of :func:`gru_forest`: dX plus parameter gradients keyed
    like the GruParams fields. ``dS`` holds the loss gradient of every node
    state."""
    n, H = c.HP.shape
    Uzr = np.vstack([p.W_z[:, :H], p.W_r[:, :H]])
    Uh = p.W_h[:, :H]
    dh_all = np.zeros((n + 1, H))
    dh_all[:n] = dS
    dA = np.empty((n, 3 * H))
    for idx in reversed(c.levels):
        dh = dh_all[idx]
        hp, z, r, hc = c.HP[idx], c.Z[idx], c.R[idx], c.HC[idx]
        dah = dh * z * (1.0 - hc * hc)
        drh = dah @ Uh
        dazr = np.hstack([(dh * (hc - hp)) * z * (1.0 - z), (drh * hp) * r * (1.0 - r)])
        dhp = dh * (1.0 - z) + drh * r + dazr @ Uzr
        dA[idx, : 2 * H] = dazr
        dA[idx, 2 * H :] = dah
        np.add.at(dh_all, c.parent[idx], dhp)
    dAz, dAr, dAh = dA[:, :H], dA[:, H : 2 * H], dA[:, 2 * H :]
    RHP = c.R * c.HP
    grads = {
        "W_z": np.hstack([dAz.T @ c.HP, dAz.T @ c.X]),
        "W_r": np.hstack([dAr.T @ c.HP, dAr.T @ c.X]),
        "W_h": np.hstack([dAh.T @ RHP, dAh.T @ c.X]),
        "b_z": dAz.sum(axis=0),
        "b_r": dAr.sum(axis=0),
        "b_h": dAh.sum(axis=0),
    }
    Wx = np.vstack([p.W_z[:, H:], p.W_r[:, H:], p.W_h[:, H:]])
    return dA @ Wx, grads


def chain_forest(lengths: Sequence[int]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Parent array for independent chains, and each chain's node indices."""
    parent = []
    chains = []
    pos = 0
    for L in lengths:
        if L < 1:
            raise DomainError("empty sequence")
        parent.extend([-1] + list(range(pos, pos + L - 1)))
        chains.append(np.arange(pos, pos + L))
        pos += L
    return np.asarray(parent, dtype=np.int64), chains


@dataclass
class TokenTrie:
    """Prefix tree over token sequences."""

    tokens: np.ndarray  # token id per node
    parent: np.ndarray  # -1 for roots
    chains: list[np.ndarray]  # node indices of each inserted sequence

    @classmethod
    def build(cls, sequences: Sequence[Sequence[int]]) -> TokenTrie:
        index: dict[tuple[int, int], int] = {}
        tokens: list[int] = []
        parent: list[int] = []
        chains = []
        for seq in sequences:
            node = -1
            chain = []
            for tok in seq:
                key = (node, int(tok))
                nxt = index.get(key)
                if nxt is None:
                    nxt = len(tokens)
                    index[key] = nxt
                    tokens.append(int(tok))
                    parent.append(node)
                node = nxt
                chain.append(node)
            if not chain:
                raise DomainError("empty sequence")
            chains.append(np.asarray(chain, dtype=np.int64))
        return cls(np.asarray(tokens, dtype=np.int64), np.asarray(parent, dtype=np.int64), chains)


def gru_sequence(X: np.ndarray, p: GruParams) -> np.ndarray:
    """All hidden states of one GRU layer over a single sequence from a zero state."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("empty sequence")
    parent, _ = chain_forest([X.shape[0]])
    states, _ = gru_forest(X, parent, p)
    return states


def attention_pool_weights(H: np.ndarray, params: AttentionPoolParams) -> np.ndarray:
    H = np.asarray(H, dtype=DTYPE)
    if H.ndim != 2 or H.shape[0] == 0:
        raise DomainError("attention pooling over an empty sequence")
    if params.u.shape != (H.shape[1],):
        raise DomainError(f"attention vector length {params.u.shape} does not match hidden width {H.shape[1]}")
    return softmax(H @ params.u)


def attention_pool(H: np.ndarray, params: AttentionPoolParams) -> np.ndarray:
    """Softmax(u . h_t)-weighted sum of the rows of ``H``."""
    return attention_pool_weights(H, params) @ np.asarray(H, dtype=DTYPE)


def attention_pool_backward(
    H: np.ndarray, u: np.ndarray, a: np.ndarray, out: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    ds = a * (H @ dout - out @ dout)
    dH = np.outer(a, dout) + np.outer(ds, u)
    return dH, H.T @ ds


def pool_paths(vectors: Sequence[np.ndarray], mode: str = "mean") -> np.ndarray:
    """Combine per-path vectors into one contract vector."""
    if len(vectors) == 0:
        raise DomainError("no path vectors to pool")
    V = np.vstack(vectors).astype(DTYPE)
    if mode == "mean":
        return V.mean(axis=0)
    if mode == "max":
        return V.max(axis=0)
    raise DomainError(f"unknown path pooling {mode!r}")


def pool_paths_backward(V: np.ndarray, mode: str, dout: np.ndarray) -> np.ndarray:
    if mode == "mean":
        return np.tile(dout / V.shape[0], (V.shape[0], 1))
    winners = np.argmax(V, axis=0)
    dV = np.zeros_like(V)
    dV[winners, np.arange(V.shape[1])] = dout
    return dV


def hyperagru_forward(
    seq: np.ndarray,
    layers: Sequence[GruParams],
    pool: AttentionPoolParams,
    *,
    training: bool = False,
    dropout: float = 0.5,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    h = np.asarray(seq, dtype=DTYPE)
    if h.ndim != 2 or h.shape[0] == 0:
        raise DomainError("empty opcode sequence")
    for i, p in enumerate(layers):
        if i > 0:
            h = h * dropout_mask(h.shape, dropout, rng, training)
        h = gru_sequence(h, p)
    return attention_pool(h, pool)


_GRU_FIELDS = ("W_z", "W_r", "W_h", "b_z", "b_r", "b_h")


class HyperAGRU:
    """Stacked GRU plus attention pooling, parameters in a :class:`ParamStore`."""

    def __init__(
        self,
        dims: Sequence[int] = DEFAULT_DIMS,
        *,
        dropout: float = 0.5,
        prefix: str = "gru",
        pool_prefix: str = "pool",
    ) -> None:
        if len(dims) < 2:
            raise DomainError("need at least an input and a hidden width")
        self.dims = tuple(int(d) for d in dims)
        self.dropout = dropout
        self.prefix = prefix
        self.pool_name = f"{pool_prefix}.u"

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def param_names(self) -> list[str]:
        names = [f"{self.prefix}.{i}.{k}" for i in range(len(self.dims) - 1) for k in _GRU_FIELDS]
        return names + [self.pool_name]

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for i, (d_in, hid) in enumerate(zip(self.dims, self.dims[1:])):
            for k in ("W_z", "W_r", "W_h"):
                store.add(f"{self.prefix}.{i}.{k}", glorot_uniform(rng, (hid, hid + d_in), hid + d_in, hid))
            for k in ("b_z", "b_r", "b_h"):
                store.add(f"{self.prefix}.{i}.{k}", np.zeros(hid))
        store.add(self.pool_name, glorot_uniform(rng, (self.dims[-1],), self.dims[-1], 1))

    def layer(self, store: ParamStore, i: int) -> GruParams:
        return GruParams(*(store.value(f"{self.prefix}.{i}.{k}") for k in _GRU_FIELDS))

    def forward_forest(
        self,
        store: ParamStore,
        X: np.ndarray,
        parent: np.ndarray,
        chains: Sequence[np.ndarray],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[list[np.ndarray], tuple]:
        """Encode every chain of a forest; returns one pooled vector per chain.

        In training mode the dropout mask between layers is drawn per forest
        node, so chains sharing a prefix share its mask.
        """
        h = np.asarray(X, dtype=DTYPE)
        if h.ndim != 2 or h.shape[1] != self.dims[0]:
            raise DomainError(f"sequence width must be {self.dims[0]}, got {h.shape}")
        caches = []
        for i in range(len(self.dims) - 1):
            mask = None
            if i > 0 and training and self.dropout > 0:
                mask = dropout_mask(h.shape, self.dropout, rng, True)
                h = h * mask
            h, cache = gru_forest(h, parent, self.layer(store, i))
            caches.append((cache, mask))
        u = store.value(self.pool_name)
        pooled, weights = [], []
        for chain in chains:
            states = h[chain]
            a = softmax(states @ u)
            weights.append(a)
            pooled.append(a @ states)
        return pooled, (caches, h, list(chains), weights, pooled)

    def backward_forest(self, store: ParamStore, cache: tuple, douts: Sequence[np.ndarray]) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient of the node inputs."""
        caches, h, chains, weights, pooled = cache
        u = store.value(self.pool_name)
        du = np.zeros_like(u)
        dS = np.zeros_like(h)
        for chain, a, out, dout in zip(chains, weights, pooled, douts):
            dH, dui = attention_pool_backward(h[chain], u, a, out, dout)
            du += dui
            np.add.at(dS, chain, dH)
        store.accumulate(self.pool_name, du)
        d = dS
        for i in reversed(range(len(caches))):
            forest_cache, mask = caches[i]
            d, grads = gru_forest_backward(forest_cache, self.layer(store, i), d)
            for k, g in grads.items():
                store.accumulate(f"{self.prefix}.{i}.{k}", g)
            if mask is not None:
                d = d * mask
        return d

    def forward(
        self,
        store: ParamStore,
        seq: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, tuple]:
        seq = np.asarray(seq, dtype=DTYPE)
        if seq.ndim != 2 or seq.shape[0] == 0:
            raise DomainError("empty opcode sequence")
        parent, chains = chain_forest([seq.shape[0]])
        pooled, cache = self.forward_forest(store, seq, parent, chains, training, rng)
        return pooled[0], cache

    def backward(self, store: ParamStore, cache: tuple, dout: np.ndarray) -> np.ndarray:
        return self.backward_forest(store, cache, [dout])
