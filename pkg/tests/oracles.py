"""Independent reference computations used as test oracles.

These are written as plain loops over scalars and python lists, sharing no
code with the package beyond its data types.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from dvdet.cfg import JUMP, BasicBlock, ControlFlowGraph, Edge
from dvdet.disasm import Instruction, assemble


# control flow -----------------------------------------------------------

def all_paths(succ: dict[int, list[int]], entry: int) -> set[tuple[int, ...]]:
    """Every simple path from ``entry`` that stops where no unvisited successor remains."""
    out: set[tuple[int, ...]] = set()

    def walk(path: list[int]) -> None:
        nxt = [s for s in succ.get(path[-1], []) if s not in path]
        if not nxt:
            out.add(tuple(path))
            return
        for s in nxt:
            walk(path + [s])

    walk([entry])
    return out


def bfs_reachable(entry: int, edges) -> set[int]:
    adj: dict[int, list[int]] = {}
    for e in edges:
        adj.setdefault(e.src, []).append(e.dst)
    seen = {entry}
    q = deque([entry])
    while q:
        u = q.popleft()
        for v in adj.get(u, []):
            if v not in seen:
                seen.add(v)
                q.append(v)
    return seen


def random_dag_cfg(rng: np.random.Generator, max_blocks: int = 8, p_edge: float = 0.4) -> ControlFlowGraph:
    """A CFG object over a random DAG; block i sits at offset 16*i."""
    n = int(rng.integers(1, max_blocks + 1))
    blocks = {}
    for i in range(n):
        body = [Instruction(16 * i, "JUMPDEST", 0x5B)] if i else []
        body += [Instruction(16 * i + 1 + k, "ADD", 0x01) for k in range(int(rng.integers(0, 3)))]
        blocks[i] = BasicBlock(i, 16 * i, tuple(body), "FALLTHROUGH")
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                edges.add(Edge(i, j, JUMP))
    return ControlFlowGraph(blocks, frozenset(edges), 0)


def random_dag_bytecode(rng: np.random.Generator, max_blocks: int = 8) -> tuple[bytes, dict[int, list[int]]]:
    """Bytecode whose CFG is a random DAG, plus the intended block successor map.

    Every block after the first opens with a JUMPDEST and is padded to 16
    bytes, so block i starts at offset 16*i.
    """
    n = int(rng.integers(1, max_blocks + 1))
    succ: dict[int, list[int]] = {}
    code = bytearray()
    for i in range(n):
        head = assemble(["JUMPDEST"] if i else [])
        choice = rng.integers(0, 4) if i < n - 1 else 0
        if choice == 0:
            tail = assemble([str(rng.choice(["STOP", "RETURN", "REVERT"]))])
            succ[i] = []
        elif choice == 1:
            j = int(rng.integers(i + 1, n))
            tail = assemble([("PUSH2", 16 * j), "JUMP"])
            succ[i] = [j]
        elif choice == 2 and i + 2 < n:
            k = int(rng.integers(i + 2, n))
            tail = assemble(["CALLVALUE", ("PUSH2", 16 * k), "JUMPI"])
            succ[i] = [i + 1, k]
        else:
            tail = b""  # falls through into the next JUMPDEST
            succ[i] = [i + 1]
        # CALLER never ends a block, so padding keeps the terminator last
        code += head + b"\x33" * (16 - len(head) - len(tail)) + tail
    return bytes(code), succ


# neural oracles ---------------------------------------------------------

def _dot(u, v) -> float:
    return sum(float(a) * float(b) for a, b in zip(u, v))


def _matvec(M, v):
    """Row-wise: M is rows x cols, v has cols entries."""
    return [_dot(row, v) for row in M]


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def softmax_naive(v) -> list[float]:
    e = [math.exp(float(x)) for x in v]
    s = sum(e)
    return [x / s for x in e]


def elu_scalar(x: float) -> float:
    return x if x > 0 else math.exp(x) - 1.0


def gat_reference(X, W, a, neighbours: dict[int, list[int]], slope: float = 0.2) -> np.ndarray:
    """Single-head GAT with attention vector ``[a, a]`` over ``[Wx_i || Wx_j]``.

    ``neighbours[i]`` must already include i itself.
    """
    n = len(X)
    Wt = np.asarray(W).T.tolist()  # out x in
    H = [_matvec(Wt, x) for x in np.asarray(X).tolist()]
    a2 = list(a) + list(a)
    out = np.zeros((n, len(a)))
    for i in range(n):
        logits = []
        for j in neighbours[i]:
            z = _dot(a2, H[i] + H[j])
            logits.append(z if z > 0 else slope * z)
        att = softmax_naive(logits)
        for c in range(len(a)):
            acc = sum(att[k] * H[j][c] for k, j in enumerate(neighbours[i]))
            out[i, c] = elu_scalar(acc)
    return out


def egat_reference(X, W, a, weights: dict[tuple[int, int], float], slope: float = 0.2) -> np.ndarray:
    """Edge-scaled attention, one scalar at a time. ``weights`` holds every
    ordered pair (i, j) that i attends to, self-loops included."""
    n = len(X)
    Wt = np.asarray(W).T.tolist()
    H = [_matvec(Wt, x) for x in np.asarray(X).tolist()]
    out = np.zeros((n, len(a)))
    for i in range(n):
        nbrs = sorted(j for (t, j) in weights if t == i)
        logits = []
        for j in nbrs:
            z = (_dot(a, H[i]) + _dot(a, H[j])) * weights[(i, j)]
            logits.append(z if z > 0 else slope * z)
        att = softmax_naive(logits)
        for c in range(len(a)):
            out[i, c] = elu_scalar(sum(att[k] * H[j][c] for k, j in enumerate(nbrs)))
    return out


def gru_cell_reference(x, h, W_z, W_r, W_h, b_z, b_r, b_h) -> np.ndarray:
    """One GRU step, component by component."""
    x = [float(v) for v in x]
    h = [float(v) for v in h]
    hx = h + x
    H = len(h)
    z = [_sig(_dot(W_z[k], hx) + b_z[k]) for k in range(H)]
    r = [_sig(_dot(W_r[k], hx) + b_r[k]) for k in range(H)]
    rhx = [r[k] * h[k] for k in range(H)] + x
    cand = [math.tanh(_dot(W_h[k], rhx) + b_h[k]) for k in range(H)]
    return np.array([(1 - z[k]) * h[k] + z[k] * cand[k] for k in range(H)])


def attention_pool_reference(H, u) -> np.ndarray:
    rows = np.asarray(H).tolist()
    a = softmax_naive([_dot(u, r) for r in rows])
    return np.array([sum(a[t] * rows[t][c] for t in range(len(rows))) for c in range(len(rows[0]))])


def cross_entropy_reference(p, y) -> float:
    return -sum(float(yi) * math.log(float(pi)) for pi, yi in zip(p, y) if yi)


def fuse_reference(x_graph, h_seq, W, b) -> np.ndarray:
    v = list(x_graph) + list(h_seq)
    cols = np.asarray(W).T.tolist()
    return np.array(softmax_naive([_dot(col, v) + float(bk) for col, bk in zip(cols, b)]))
