"""End-to-end sample preparation: files on disk to model-ready samples."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, TypeVar

from dvdet.ast_graph import (
    GraphBuildError,
    VulnRuleSet,
    WeightedCodeGraph,
    build_weighted_graph,
    filter_tree,
    load_ast,
    load_rule_sets,
)
from dvdet.cfg import ControlFlowPath, build_cfg, eliminate_dead_blocks, extract_paths
from dvdet.disasm import disassemble, load_code, strip_metadata
from dvdet.embed import load_external_embeddings
from dvdet.errors import DomainError, InputFormatError
from dvdet.model import Sample, TrainConfig

log = logging.getLogger(__name__)

T = TypeVar("T")


class StageError(Exception):
    """A pipeline stage failed; carries the stage name and a CLI exit code."""

    def __init__(self, stage: str, message: str, exit_code: int = 2) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message
        self.exit_code = exit_code


def run_stage(stage: str, fn: Callable[..., T], *args, **kwargs) -> T:
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except FileNotFoundError as exc:
        raise StageError(stage, f"file not found: {exc.filename}") from exc
    except (InputFormatError, DomainError, GraphBuildError, OSError) as exc:
        raise StageError(stage, str(exc).replace("\n", " ")) from exc
    except AssertionError as exc:
        raise StageError(stage, f"invariant violated: {exc}", 4) from exc


@dataclass
class ManifestRecord:
    id: str
    ast_path: Path | None
    bytecode_path: Path | None
    label: str | int | None
    label_source: str = ""
    solc_version: str | None = None
    embeddings_path: Path | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "ast_path": str(self.ast_path) if self.ast_path else None,
            "bytecode_path": str(self.bytecode_path) if self.bytecode_path else None,
            "label": self.label,
            "label_source": self.label_source,
            "solc_version": self.solc_version,
        }


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    out = []
    seen = set()

    def resolve(value: str | None) -> Path | None:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(row, dict) or "id" not in row:
                raise InputFormatError(f"{path}:{lineno}: record needs an 'id'")
            if row["id"] in seen:
                raise InputFormatError(f"{path}:{lineno}: duplicate id {row['id']!r}")
            seen.add(row["id"])
            out.append(
                ManifestRecord(
                    str(row["id"]),
                    resolve(row.get("ast_path")),
                    resolve(row.get("bytecode_path")),
                    row.get("label"),
                    row.get("label_source", ""),
                    row.get("solc_version"),
                    resolve(row.get("embeddings_path")),
                )
            )
    return out


def select_rules(rule_sets: dict[str, VulnRuleSet], name: str) -> VulnRuleSet | list[VulnRuleSet]:
    if name == "all":
        return list(rule_sets.values())
    if name not in rule_sets:
        raise InputFormatError(f"unknown rule set {name!r}; have {sorted(rule_sets)}")
    return rule_sets[name]


def bytecode_paths(
    path: str | Path,
    *,
    max_paths: int,
    max_blocks: int,
    strip: bool = True,
) -> list[ControlFlowPath]:
    code = run_stage("disasm", load_code, path)
    if strip:
        code = strip_metadata(code)
    instructions = run_stage("disasm", disassemble, code)
    cfg = run_stage("cfg", lambda: eliminate_dead_blocks(build_cfg(instructions)))
    return run_stage("paths", extract_paths, cfg, max_paths, max_blocks)


def source_graph(
    ast_path: str | Path,
    rules: VulnRuleSet | Sequence[VulnRuleSet],
    *,
    sibling_edges: bool = False,
    embeddings_path: str | Path | None = None,
    dim: int = 768,
) -> WeightedCodeGraph:
    from dvdet.embed import embed_node

    tree = run_stage("ast", load_ast, ast_path)
    tree = filter_tree(tree)
    external = run_stage("embed", load_external_embeddings, embeddings_path) if embeddings_path else None
    return run_stage(
        "graph",
        build_weighted_graph,
        tree,
        rules,
        lambda n: embed_node(n, dim),
        external=external,
        sibling_edges=sibling_edges,
    )


def prepare_sample(
    record: ManifestRecord,
    config: TrainConfig,
    rule_sets: dict[str, VulnRuleSet] | None = None,
    *,
    require_label: bool = True,
) -> Sample:
    rule_sets = load_rule_sets() if rule_sets is None else rule_sets
    graph = None
    paths: list[ControlFlowPath] = []
    if config.mode != "bytecode-only":
        if record.ast_path is None:
            if config.mode == "source-only":
                raise StageError("ast", f"{record.id}: no ast_path in source-only mode")
        else:
            graph = source_graph(
                record.ast_path,
                run_stage("graph", select_rules, rule_sets, config.rule_set),
                sibling_edges=config.sibling_edges,
                embeddings_path=record.embeddings_path,
                dim=config.graph_dims[0],
            )
    if config.mode != "source-only":
        if record.bytecode_path is None:
            if config.mode == "bytecode-only":
                raise StageError("disasm", f"{record.id}: no bytecode_path in bytecode-only mode")
        else:
            paths = bytecode_paths(
                record.bytecode_path,
                max_paths=config.max_paths,
                max_blocks=config.max_blocks,
                strip=config.strip_metadata,
            )
    if record.label is None:
        if require_label:
            raise StageError("manifest", f"{record.id}: missing label")
        label = 0
    else:
        label = run_stage("manifest", config.label_index, record.label)
    return Sample(record.id, graph, paths, label, record.label_source)


def load_samples(
    records: Sequence[ManifestRecord],
    config: TrainConfig,
    rule_sets: dict[str, VulnRuleSet] | None = None,
    workers: int = 1,
) -> list[Sample]:
    rule_sets = load_rule_sets() if rule_sets is None else rule_sets
    if workers <= 1:
        return [prepare_sample(r, config, rule_sets) for r in records]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda r: prepare_sample(r, config, rule_sets), records))
