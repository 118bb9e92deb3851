"""Solidity AST ingestion and importance-weighted code graphs."""

from __future__ import annotations

import enum
import json
import sys
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence, Union

import numpy as np

from dvdet.errors import DomainError, InputFormatError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

Scalar = Union[str, int, float, bool]

# node types that open a scope for the duplicate-name pass
_SCOPES = frozenset({"FunctionDefinition", "ModifierDefinition"})
_SKIP_KEYS = frozenset({"id", "nodeType", "src"})


class AstParseError(InputFormatError):
    """The AST JSON is malformed."""


class GraphBuildError(ValueError):
    """Graph construction received inconsistent inputs."""


class ImportanceTier(enum.Enum):
    CORE = 2.0
    SUB_CORE = 1.5
    AUXILIARY = 1.25
    PERIPHERAL = 1.0

    @property
    def label(self) -> str:
        return self.name.lower()


TIER_VALUES = frozenset(t.value for t in ImportanceTier)


@dataclass
class AstNode:
    id: int
    node_type: str
    retained_fields: dict[str, Scalar]
    source_text: str | None = None
    children: list[int] = field(default_factory=list)
    parent: int | None = None
    # key under which the parent holds this node, e.g. "condition"
    parent_key: str | None = None


@dataclass
class AstTree:
    nodes: dict[int, AstNode]
    root: int

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> AstNode:
        return self.nodes[node_id]

    def preorder(self) -> Iterator[AstNode]:
        stack = [self.root]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def subtree(self, node_id: int) -> Iterator[AstNode]:
        stack = [node_id]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def scope_of(self, node_id: int) -> int | None:
        """Id of the nearest enclosing function or modifier, if any."""
        cur = self.nodes[node_id].parent
        while cur is not None:
            if self.nodes[cur].node_type in _SCOPES:
                return cur
            cur = self.nodes[cur].parent
        return None

    def is_descendant(self, node_id: int, ancestor: int) -> bool:
        cur = self.nodes[node_id].parent
        while cur is not None:
            if cur == ancestor:
                return True
            cur = self.nodes[cur].parent
        return False


def _is_node(value: Any) -> bool:
    return isinstance(value, dict) and "nodeType" in value


def _scalar_fields(raw: dict) -> dict[str, Scalar]:
    out: dict[str, Scalar] = {}
    for key, value in raw.items():
        if key in _SKIP_KEYS:
            continue
        if isinstance(value, (str, int, float, bool)):
            out[key] = value
        elif key == "typeDescriptions" and isinstance(value, dict):
            if isinstance(value.get("typeString"), str):
                out["typeString"] = value["typeString"]
        elif isinstance(value, list) and value and all(isinstance(v, (str, int, float, bool)) for v in value):
            out[key] = ",".join(str(v) for v in value)
    return out


def _src_start(raw: dict) -> tuple[int, int] | None:
    src = raw.get("src")
    if not isinstance(src, str):
        return None
    parts = src.split(":")
    try:
        return int(parts[0]), int(parts[1])
    except (IndexError, ValueError):
        return None


def _unwrap(doc: Any, source: str | None) -> tuple[dict, str | None]:
    if not isinstance(doc, dict) or not doc:
        raise AstParseError("$: expected a non-empty JSON object")
    if _is_node(doc):
        return doc, source
    if "ast" in doc and _is_node(doc["ast"]):
        return doc["ast"], source if source is not None else doc.get("source")
    if isinstance(doc.get("sources"), dict):
        units = [v["ast"] for v in doc["sources"].values() if isinstance(v, dict) and _is_node(v.get("ast"))]
        if len(units) == 1:
            return units[0], source
        raise AstParseError(f"$.sources: expected exactly one source unit, found {len(units)}")
    missing = "nodeType" if "id" in doc else "id/nodeType"
    raise AstParseError(f"$: missing {missing}")


def parse_ast(doc: str | bytes | Mapping, source: str | None = None) -> AstTree:
    """Build an :class:`AstTree` from solc / solc-typed-ast JSON.

    Accepts a bare AST node, ``{"ast": ..., "source": ...}``, or compiler
    output with a single entry under ``sources``. When source text is known,
    each node gets the excerpt its ``src`` range points at. Children are
    ordered by source position.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise AstParseError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    root_raw, source = _unwrap(doc, source)
    source_bytes = source.encode() if source is not None else None
    nodes: dict[int, AstNode] = {}

    def visit(raw: dict, path: str, parent: int | None, key: str | None) -> int:
        if "id" not in raw or "nodeType" not in raw:
            missing = "id" if "id" not in raw else "nodeType"
            raise AstParseError(f"{path}: node is missing {missing!r}")
        node_id = raw["id"]
        if not isinstance(node_id, int) or isinstance(node_id, bool):
            raise AstParseError(f"{path}: id must be an integer")
        if node_id in nodes:
            raise AstParseError(f"{path}: duplicate node id {node_id}")
        span = _src_start(raw)
        text = None
        if source_bytes is not None and span is not None and span[0] >= 0:
            text = source_bytes[span[0] : span[0] + span[1]].decode(errors="replace")
        node = AstNode(node_id, str(raw["nodeType"]), _scalar_fields(raw), text, [], parent, key)
        nodes[node_id] = node
        found: list[tuple[int, int, int]] = []
        order = 0
        for k, value in raw.items():
            if _is_node(value) or (isinstance(value, dict) and "id" in value and "src" in value):
                items = [(f"{path}.{k}", value)]
            elif isinstance(value, list):
                items = [(f"{path}.{k}[{i}]", v) for i, v in enumerate(value) if isinstance(v, dict) and ("nodeType" in v or "id" in v and "src" in v)]
            else:
                continue
            for child_path, child in items:
                child_span = _src_start(child)
                cid = visit(child, child_path, node_id, k)
                found.append((child_span[0] if child_span else 1 << 62, order, cid))
                order += 1
        node.children = [cid for _, _, cid in sorted(found)]
        return node_id

    root = visit(root_raw, "$", None, None)
    return AstTree(nodes, root)


def load_ast(path: str | Path, source_path: str | Path | None = None) -> AstTree:
    path = Path(path)
    source = None
    if source_path is not None:
        source = Path(source_path).read_text(encoding="utf-8")
    else:
        sol = path.with_suffix("").with_suffix(".sol")
        if sol.exists() and sol != path:
            source = sol.read_text(encoding="utf-8")
    try:
        return parse_ast(path.read_text(encoding="utf-8"), source)
    except AstParseError as exc:
        raise AstParseError(f"{path}: {exc}") from exc


def load_retention_table(path: str | Path | None = None) -> dict[str, tuple[str, ...]]:
    if path is None:
        text = resources.files("dvdet.data").joinpath("retention.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    return {k: tuple(v) for k, v in data["retain"].items()}


_RETENTION: dict[str, tuple[str, ...]] | None = None


def _default_retention() -> dict[str, tuple[str, ...]]:
    global _RETENTION
    if _RETENTION is None:
        _RETENTION = load_retention_table()
    return _RETENTION


def filter_node_fields(node: AstNode, table: Mapping[str, Sequence[str]] | None = None) -> AstNode:
    """Keep only the fields the retention table lists for the node's type."""
    table = _default_retention() if table is None else table
    keep = table.get(node.node_type, ("name",))
    kept = {k: node.retained_fields[k] for k in keep if k in node.retained_fields}
    return replace(node, retained_fields=kept, children=list(node.children))


def filter_tree(tree: AstTree, table: Mapping[str, Sequence[str]] | None = None) -> AstTree:
    return AstTree({k: filter_node_fields(v, table) for k, v in tree.nodes.items()}, tree.root)


@dataclass(frozen=True)
class Matcher:
    """Structural / textual predicate over a single AST node.

    Every given criterion must hold: ``node_type`` equality, exact ``fields``
    values, substring ``contains`` on field values, substring ``text`` on the
    node's own source excerpt (case-sensitive), the parent's type and the key
    the parent holds the node under (``role``), and ``child`` matching at
    least one direct child.
    """

    node_type: str | None = None
    fields: tuple[tuple[str, Scalar], ...] = ()
    contains: tuple[tuple[str, str], ...] = ()
    text: str | None = None
    parent_type: str | None = None
    role: str | None = None
    child: Matcher | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Matcher:
        unknown = set(d) - {"node_type", "fields", "contains", "text", "parent_type", "role", "child"}
        if unknown:
            raise InputFormatError(f"unknown matcher keys: {sorted(unknown)}")
        return cls(
            node_type=d.get("node_type"),
            fields=tuple(sorted((d.get("fields") or {}).items())),
            contains=tuple(sorted((d.get("contains") or {}).items())),
            text=d.get("text"),
            parent_type=d.get("parent_type"),
            role=d.get("role"),
            child=cls.from_dict(d["child"]) if d.get("child") else None,
        )

    def matches(self, node: AstNode, tree: AstTree | None = None) -> bool:
        if self.node_type is not None and node.node_type != self.node_type:
            return False
        for key, value in self.fields:
            if key not in node.retained_fields or node.retained_fields[key] != value:
                return False
        for key, sub in self.contains:
            if sub not in str(node.retained_fields.get(key, "")):
                return False
        if self.text is not None and (node.source_text is None or self.text not in node.source_text):
            return False
        if self.parent_type is not None or self.role is not None:
            if tree is None or node.parent is None:
                return False
            if self.parent_type is not None and tree[node.parent].node_type != self.parent_type:
                return False
            if self.role is not None and node.parent_key != self.role:
                return False
        if self.child is not None:
            if tree is None or not any(self.child.matches(tree[c], tree) for c in node.children):
                return False
        return True


@dataclass(frozen=True)
class VulnRuleSet:
    vuln_id: str
    core_patterns: tuple[Matcher, ...] = ()
    sub_core_patterns: tuple[Matcher, ...] = ()
    auxiliary_patterns: tuple[Matcher, ...] = ()
    origin: str = "heuristic"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> VulnRuleSet:
        def pats(key: str) -> tuple[Matcher, ...]:
            return tuple(Matcher.from_dict(m) for m in d.get(key, ()))

        return cls(d["vuln_id"], pats("core"), pats("sub_core"), pats("auxiliary"), d.get("origin", "heuristic"))


def load_rule_sets(path: str | Path | None = None) -> dict[str, VulnRuleSet]:
    """Read rule sets from JSON or TOML (``[[rule_sets]]`` tables)."""
    if path is None:
        data = json.loads(resources.files("dvdet.data").joinpath("rules.json").read_text(encoding="utf-8"))
    else:
        path = Path(path)
        raw = path.read_bytes()
        try:
            data = tomllib.loads(raw.decode()) if path.suffix == ".toml" else json.loads(raw)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise InputFormatError(f"{path}: {exc}") from exc
    return {rs["vuln_id"]: VulnRuleSet.from_dict(rs) for rs in data["rule_sets"]}


def classify_importance(node: AstNode, rules: VulnRuleSet, tree: AstTree | None = None) -> ImportanceTier:
    """Tier of a single node; first match wins, core before sub-core before auxiliary."""
    for tier, patterns in (
        (ImportanceTier.CORE, rules.core_patterns),
        (ImportanceTier.SUB_CORE, rules.sub_core_patterns),
        (ImportanceTier.AUXILIARY, rules.auxiliary_patterns),
    ):
        if any(m.matches(node, tree) for m in patterns):
            return tier
    return ImportanceTier.PERIPHERAL


def _reference_names(node: AstNode) -> set[str]:
    names = set()
    for key in ("name", "memberName"):
        value = node.retained_fields.get(key)
        if isinstance(value, str) and value:
            names.add(value)
    return names


def classify_tree(
    tree: AstTree, rules: VulnRuleSet | Sequence[VulnRuleSet]
) -> dict[int, ImportanceTier]:
    """Tier every node of ``tree``.

    After direct matching, peripheral nodes inside a function (or modifier)
    that name the same identifier or member as a core or sub-core expression
    of that function are raised to auxiliary. With several rule sets each
    node takes its highest tier across them.
    """
    if isinstance(rules, VulnRuleSet):
        return _classify_one(tree, rules)
    merged: dict[int, ImportanceTier] = {}
    for rs in rules:
        for nid, tier in _classify_one(tree, rs).items():
            if nid not in merged or tier.value > merged[nid].value:
                merged[nid] = tier
    return merged


def _classify_one(tree: AstTree, rules: VulnRuleSet) -> dict[int, ImportanceTier]:
    tiers = {node.id: classify_importance(node, rules, tree) for node in tree.preorder()}
    scope_names: dict[int, set[str]] = {}
    for nid, tier in tiers.items():
        if tier in (ImportanceTier.CORE, ImportanceTier.SUB_CORE):
            scope = tree.scope_of(nid)
            if scope is None:
                continue
            bucket = scope_names.setdefault(scope, set())
            for sub in tree.subtree(nid):
                bucket |= _reference_names(sub)
    if scope_names:
        for nid, tier in tiers.items():
            if tier is not ImportanceTier.PERIPHERAL:
                continue
            node = tree[nid]
            if node.node_type not in ("Identifier", "MemberAccess"):
                continue
            scope = tree.scope_of(nid)
            if scope in scope_names and _reference_names(node) & scope_names[scope]:
                tiers[nid] = ImportanceTier.AUXILIARY
    return tiers


def edge_weight(s_i: float, s_j: float) -> float:
    """Importance of an edge: the smaller of its endpoint tier values."""
    if s_i not in TIER_VALUES or s_j not in TIER_VALUES:
        raise DomainError(f"tier values must be in {sorted(TIER_VALUES)}, got ({s_i}, {s_j})")
    return min(s_i, s_j)


@dataclass
class WeightedCodeGraph:
    """Undirected graph with per-node tier values, per-edge weights and features."""

    node_ids: list[int]
    node_types: list[str]
    tiers: np.ndarray
    edges: list[tuple[int, int]]  # index pairs into node_ids
    weights: np.ndarray
    features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_tiers(
        cls,
        tiers: Sequence[float],
        edges: Sequence[tuple[int, int]],
        features: np.ndarray,
        node_ids: Sequence[int] | None = None,
        node_types: Sequence[str] | None = None,
    ) -> WeightedCodeGraph:
        n = len(tiers)
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != n:
            raise GraphBuildError(f"{features.shape[0]} feature rows for {n} nodes")
        norm = sorted({(min(u, v), max(u, v)) for u, v in edges if u != v})
        for u, v in norm:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphBuildError(f"edge ({u}, {v}) out of range")
        weights = np.array([edge_weight(tiers[u], tiers[v]) for u, v in norm], dtype=np.float64)
        return cls(
            list(node_ids) if node_ids is not None else list(range(n)),
            list(node_types) if node_types is not None else ["?"] * n,
            np.asarray(tiers, dtype=np.float64),
            norm,
            weights,
            features,
        )

    @cached_property
    def _pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n_nodes
        if self.edges:
            e = np.asarray(self.edges, dtype=np.int64)
            rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
            cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
            s = np.concatenate([self.weights, self.weights, self.tiers])
        else:
            rows = cols = np.arange(n)
            s = self.tiers.copy()
        return rows, cols, s

    def attention_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed (target, neighbour, weight) triples; each node also attends
        to itself with its own tier value."""
        return self._pairs

    def to_json(self) -> dict:
        labels = {t.value: t.label for t in ImportanceTier}
        return {
            "nodes": [
                {"id": nid, "type": typ, "tier": labels[float(s)], "feature_ref": i}
                for i, (nid, typ, s) in enumerate(zip(self.node_ids, self.node_types, self.tiers))
            ],
            "edges": [
                {"u": self.node_ids[u], "v": self.node_ids[v], "weight": float(w)}
                for (u, v), w in zip(self.edges, self.weights)
            ],
        }


def tree_edges(tree: AstTree, sibling_edges: bool = False) -> list[tuple[int, int]]:
    """Parent-child edges by node id, optionally plus edges between
    consecutive statements of a block."""
    out = []
    for node in tree.preorder():
        for c in node.children:
            out.append((node.id, c))
        if sibling_edges:
            stmts = [c for c in node.children if tree[c].parent_key == "statements"]
            out.extend(zip(stmts, stmts[1:]))
    return out


def build_weighted_graph(
    tree: AstTree,
    rules: VulnRuleSet | Sequence[VulnRuleSet],
    embedder: Callable[[AstNode], np.ndarray] | None = None,
    *,
    external: Mapping[int, np.ndarray] | None = None,
    sibling_edges: bool = False,
) -> WeightedCodeGraph:
    """Turn a filtered AST into a weighted graph with one feature row per node.

    Vectors from ``external`` take precedence over ``embedder`` output.
    """
    if embedder is None:
        from dvdet.embed import embed_node as embedder
    order = [n.id for n in tree.preorder()]
    index = {nid: i for i, nid in enumerate(order)}
    tiers = classify_tree(tree, rules)
    rows = []
    for nid in order:
        if external is not None and nid in external:
            vec = np.asarray(external[nid], dtype=np.float64)
        else:
            vec = np.asarray(embedder(tree[nid]), dtype=np.float64)
        rows.append(vec)
    widths = {r.shape for r in rows}
    if len(widths) != 1 or len(next(iter(widths))) != 1:
        raise GraphBuildError(f"node embeddings have inconsistent shapes: {sorted(widths)}")
    edges = [(index[u], index[v]) for u, v in tree_edges(tree, sibling_edges)]
    return WeightedCodeGraph.from_tiers(
        [tiers[nid].value for nid in order],
        edges,
        np.vstack(rows),
        order,
        [tree[nid].node_type for nid in order],
    )
