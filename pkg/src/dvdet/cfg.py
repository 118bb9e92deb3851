"""Basic-block control flow graphs over decoded EVM instructions."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from dvdet.disasm import Instruction
from dvdet.opcodes import HALTING, PUSH_FIRST, PUSH_LAST

JUMP = "jump"
FALLTHROUGH = "fallthrough"
BRANCH_TAKEN = "branch-taken"
BRANCH_NOT_TAKEN = "branch-not-taken"
UNRESOLVED = "unresolved"

EDGE_KINDS = (JUMP, FALLTHROUGH, BRANCH_TAKEN, BRANCH_NOT_TAKEN, UNRESOLVED)

DEFAULT_MAX_PATHS = 32
DEFAULT_MAX_BLOCKS = 256


@dataclass(frozen=True)
class BasicBlock:
    id: int
    start_offset: int
    instructions: tuple[Instruction, ...]
    # JUMP, JUMPI, STOP, RETURN, REVERT, SELFDESTRUCT, INVALID or FALLTHROUGH
    terminator: str
    # the shared sink for unresolved jumps; carries no code
    synthetic: bool = False

    @property
    def mnemonics(self) -> list[str]:
        return [ins.mnemonic for ins in self.instructions]


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str


@dataclass(frozen=True)
class ControlFlowGraph:
    blocks: dict[int, BasicBlock]
    edges: frozenset[Edge]
    entry: int = 0

    def successors(self, block_id: int, resolved_only: bool = True) -> list[Edge]:
        out = [
            e
            for e in self.edges
            if e.src == block_id and not (resolved_only and e.kind == UNRESOLVED)
        ]
        out.sort(key=lambda e: (self._order_key(e.dst), e.kind))
        return out

    def _order_key(self, block_id: int) -> int:
        block = self.blocks[block_id]
        # the sink sorts after every real block
        return block.start_offset if not block.synthetic else 1 << 62

    def to_json(self) -> dict:
        return {
            "entry": self.entry,
            "blocks": [
                {
                    "id": b.id,
                    "start_offset": b.start_offset,
                    "terminator": b.terminator,
                    "synthetic": b.synthetic,
                    "instructions": [str(ins) for ins in b.instructions],
                }
                for b in sorted(self.blocks.values(), key=lambda b: b.id)
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "kind": e.kind}
                for e in sorted(self.edges, key=lambda e: (e.src, e.dst, e.kind))
            ],
        }

    def to_dot(self) -> str:
        lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
        for b in sorted(self.blocks.values(), key=lambda b: b.id):
            if b.synthetic:
                label = "unresolved"
            else:
                label = "\\l".join(str(ins) for ins in b.instructions) + "\\l"
            lines.append(f'  b{b.id} [label="{label}"];')
        for e in sorted(self.edges, key=lambda e: (e.src, e.dst, e.kind)):
            style = ", style=dashed" if e.kind == UNRESOLVED else ""
            lines.append(f'  b{e.src} -> b{e.dst} [label="{e.kind}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ControlFlowPath:
    block_ids: tuple[int, ...]
    opcodes: tuple[str, ...]
    truncated: bool = False


def _is_terminator(ins: Instruction) -> bool:
    return not ins.is_valid or ins.mnemonic in HALTING or ins.mnemonic in ("JUMP", "JUMPI")


def _terminator_name(ins: Instruction) -> str:
    return "INVALID" if not ins.is_valid else ins.mnemonic


def _push_target(block: list[Instruction]) -> int | None:
    if len(block) < 2:
        return None
    prev = block[-2]
    if PUSH_FIRST <= prev.opcode <= PUSH_LAST and not prev.truncated:
        return prev.value
    return None


def build_cfg(instructions: Iterable[Instruction]) -> ControlFlowGraph:
    """Split an instruction stream into basic blocks and connect them.

    Jump targets are resolved only when the instruction right before a
    JUMP/JUMPI is a PUSH whose value is the offset of a JUMPDEST; anything
    else becomes an ``unresolved`` edge to a shared synthetic sink block.
    """
    instructions = list(instructions)
    runs: list[list[Instruction]] = []
    current: list[Instruction] = []
    for ins in instructions:
        if ins.mnemonic == "JUMPDEST" and ins.is_valid and current:
            runs.append(current)
            current = []
        current.append(ins)
        if _is_terminator(ins):
            runs.append(current)
            current = []
    if current or not runs:
        runs.append(current)

    blocks: dict[int, BasicBlock] = {}
    for i, run in enumerate(runs):
        last = run[-1] if run else None
        term = _terminator_name(last) if last is not None and _is_terminator(last) else "FALLTHROUGH"
        start = run[0].offset if run else 0
        blocks[i] = BasicBlock(i, start, tuple(run), term)

    jumpdests = {
        b.start_offset: b.id
        for b in blocks.values()
        if b.instructions and b.instructions[0].mnemonic == "JUMPDEST" and b.instructions[0].is_valid
    }

    edges: set[Edge] = set()
    sink_id = len(blocks)
    need_sink = False
    for i, run in enumerate(runs):
        block = blocks[i]
        nxt = i + 1 if i + 1 < len(runs) else None
        if block.terminator in ("JUMP", "JUMPI"):
            target = _push_target(run)
            dst = jumpdests.get(target) if target is not None else None
            if dst is None:
                edges.add(Edge(i, sink_id, UNRESOLVED))
                need_sink = True
            else:
                edges.add(Edge(i, dst, JUMP if block.terminator == "JUMP" else BRANCH_TAKEN))
            if block.terminator == "JUMPI" and nxt is not None:
                edges.add(Edge(i, nxt, BRANCH_NOT_TAKEN))
        elif block.terminator == "FALLTHROUGH" and nxt is not None:
            edges.add(Edge(i, nxt, FALLTHROUGH))
    if need_sink:
        end = instructions[-1].offset + instructions[-1].size if instructions else 0
        blocks[sink_id] = BasicBlock(sink_id, end, (), "INVALID", synthetic=True)
    return ControlFlowGraph(blocks, frozenset(edges), 0)


def eliminate_dead_blocks(cfg: ControlFlowGraph) -> ControlFlowGraph:
    """Keep only blocks reachable from the entry (unresolved edges included)."""
    seen = {cfg.entry}
    queue = deque([cfg.entry])
    adj: dict[int, list[int]] = {}
    for e in cfg.edges:
        adj.setdefault(e.src, []).append(e.dst)
    while queue:
        node = queue.popleft()
        for dst in adj.get(node, ()):
            if dst not in seen:
                seen.add(dst)
                queue.append(dst)
    if len(seen) == len(cfg.blocks):
        return cfg
    blocks = {k: v for k, v in cfg.blocks.items() if k in seen}
    edges = frozenset(e for e in cfg.edges if e.src in seen and e.dst in seen)
    return ControlFlowGraph(blocks, edges, cfg.entry)


def extract_paths(
    cfg: ControlFlowGraph,
    max_paths: int = DEFAULT_MAX_PATHS,
    max_blocks_per_path: int = DEFAULT_MAX_BLOCKS,
) -> list[ControlFlowPath]:
    """Depth-first enumeration of entry-to-exit block paths.

    A block is visited at most once per path, so loop bodies are walked once.
    A path ends where no resolved successor is left unvisited; a path cut at
    ``max_blocks_per_path`` is marked ``truncated``. Successors are taken in
    ascending start-offset order.
    """
    if max_paths < 1 or max_blocks_per_path < 1:
        raise ValueError("max_paths and max_blocks_per_path must be >= 1")
    succ: dict[int, list[int]] = {bid: [] for bid in cfg.blocks}
    for e in cfg.edges:
        if e.kind != UNRESOLVED and not cfg.blocks[e.dst].synthetic:
            succ[e.src].append(e.dst)
    for bid, dsts in succ.items():
        succ[bid] = sorted(set(dsts), key=cfg._order_key)
    paths: list[ControlFlowPath] = []
    path: list[int] = []
    on_path: set[int] = set()
    # frames of (block id, unvisited children at entry, next child index)
    stack: list[list] = []

    def enter(bid: int) -> None:
        path.append(bid)
        on_path.add(bid)
        children = [c for c in succ[bid] if c not in on_path]
        if not children or len(path) >= max_blocks_per_path:
            ops: list[str] = []
            for b in path:
                ops.extend(cfg.blocks[b].mnemonics)
            paths.append(ControlFlowPath(tuple(path), tuple(ops), bool(children)))
            children = []
        stack.append([bid, children, 0])

    enter(cfg.entry)
    while stack and len(paths) < max_paths:
        frame = stack[-1]
        _, children, idx = frame
        if idx < len(children):
            frame[2] += 1
            enter(children[idx])
        else:
            stack.pop()
            on_path.discard(path.pop())
    return paths
