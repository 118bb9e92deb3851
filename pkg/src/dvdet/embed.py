"""Node and opcode feature vectors.

Source-side node vectors come from hashed token embeddings (a stand-in for a
pretrained code encoder) or from an external vector file. Opcode vectors are
rows of a trainable table stored in the model's :class:`ParamStore`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from dvdet.errors import DomainError, InputFormatError
from dvdet.nn import DTYPE, ParamStore
from dvdet.opcodes import MNEMONICS

if TYPE_CHECKING:
    from dvdet.ast_graph import AstNode
    from dvdet.cfg import ControlFlowPath

log = logging.getLogger(__name__)

SEED = 0x5EED
NODE_DIM = 768
OPCODE_DIM = 350
OOV_BUCKETS = 8


class EmbeddingFormatError(InputFormatError):
    pass


def node_tokens(node: AstNode) -> list[str]:
    tokens = [f"type:{node.node_type}"]
    for key in sorted(node.retained_fields):
        tokens.append(f"{key}:{json.dumps(node.retained_fields[key])}")
    return tokens


def token_vector(token: str, dim: int, seed: int = SEED) -> np.ndarray:
    """Deterministic pseudo-random vector in [-1, 1)^dim for ``token``.

    Bits come from SHAKE-256, so the result is identical on every platform.
    """
    digest = hashlib.shake_256(f"{seed}|{dim}|{token}".encode()).digest(8 * dim)
    ints = np.frombuffer(digest, dtype="<u8")
    return (ints >> np.uint64(11)).astype(DTYPE) * (2.0 / 2.0**53) - 1.0


def embed_node(node: AstNode, dim: int = NODE_DIM) -> np.ndarray:
    """Unit-norm mean of the token vectors of the node's type and fields."""
    vecs = [token_vector(t, dim) for t in node_tokens(node)]
    v = np.mean(vecs, axis=0)
    return v / np.linalg.norm(v)


def _stable_bucket(token: str, buckets: int) -> int:
    return int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little") % buckets


@dataclass
class EmbeddingTable:
    """Token-to-row mapping for a trainable embedding matrix."""

    dim: int = OPCODE_DIM
    vocab: dict[str, int] = field(default_factory=lambda: {m: i for i, m in enumerate(MNEMONICS)})
    oov_buckets: int = OOV_BUCKETS
    param_name: str = "opcode_embed"

    @property
    def n_rows(self) -> int:
        return len(self.vocab) + self.oov_buckets

    def row(self, token: str) -> int:
        idx = self.vocab.get(token)
        if idx is not None:
            return idx
        return len(self.vocab) + _stable_bucket(token, self.oov_buckets)

    def rows(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.row(t) for t in tokens), dtype=np.int64, count=len(tokens))

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(self.param_name, rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=(self.n_rows, self.dim)))

    def lookup(self, store: ParamStore, tokens: Sequence[str]) -> np.ndarray:
        return store.value(self.param_name)[self.rows(tokens)]

    def backward(self, store: ParamStore, rows: np.ndarray, d: np.ndarray) -> None:
        grad = np.zeros_like(store.value(self.param_name))
        np.add.at(grad, rows, d)
        store.accumulate(self.param_name, grad)


def embed_opcode_sequence(path: ControlFlowPath, table: EmbeddingTable, store: ParamStore) -> np.ndarray:
    """One embedding row per opcode of ``path`` (len x dim)."""
    if not path.opcodes:
        raise DomainError("cannot embed an empty path")
    return table.lookup(store, path.opcodes)


def load_external_embeddings(path: str | Path) -> dict[int, np.ndarray]:
    """Read ``id<TAB>v1<TAB>v2...`` rows (any whitespace between floats)."""
    path = Path(path)
    out: dict[int, np.ndarray] = {}
    width = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            head, _, rest = line.rstrip("\n").partition("\t")
            try:
                node_id = int(head)
                vec = np.array([float(x) for x in rest.split()], dtype=DTYPE)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from exc
            if vec.size == 0:
                raise EmbeddingFormatError(f"{path}:{lineno}: no vector values")
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise EmbeddingFormatError(f"{path}:{lineno}: width {vec.size}, expected {width}")
            if node_id in out:
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate id {node_id}")
            out[node_id] = vec
    if not out:
        log.warning("%s: no embeddings found", path)
    return out


def format_embeddings(rows: dict, precision: int = 8) -> str:
    lines = []
    for key, vec in rows.items():
        lines.append(f"{key}\t" + "\t".join(f"{x:.{precision}g}" for x in vec))
    return "\n".join(lines) + ("\n" if lines else "")
