"""Synthetic contracts with class-specific motifs.

Each toy contract comes as a solc-shaped AST (no source text) plus bytecode
whose control flow carries the matching opcode pattern. Used for smoke
training, the acceptance suite and CLI demos.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from dvdet.disasm import assemble
from dvdet.nn import make_rng
from dvdet.opcodes import BY_NAME, immediate_size

_FILLER = ("ADD", "MUL", "SUB", "AND", "OR", "XOR", "DUP1", "DUP2", "SWAP1", "POP", "ISZERO", "CALLDATASIZE")


def assemble_with_labels(items: Iterable[str | tuple[str, Any]]) -> bytes:
    """Assemble with symbolic jump targets.

    ``("LABEL", name)`` emits a JUMPDEST and binds ``name`` to its offset;
    ``("PUSHL", name)`` emits a PUSH2 of that offset.
    """
    items = list(items)
    offsets: dict[str, int] = {}
    pc = 0
    for item in items:
        name = item if isinstance(item, str) else item[0]
        if name == "LABEL":
            offsets[item[1]] = pc
            pc += 1
        elif name == "PUSHL":
            pc += 3
        else:
            pc += 1 + immediate_size(BY_NAME[name])
    program: list[str | tuple[str, int]] = []
    for item in items:
        name = item if isinstance(item, str) else item[0]
        if name == "LABEL":
            program.append("JUMPDEST")
        elif name == "PUSHL":
            program.append(("PUSH2", offsets[item[1]]))
        else:
            program.append(item)
    return assemble(program)


class _AstBuilder:
    def __init__(self) -> None:
        self.next_id = 1

    def node(self, node_type: str, **fields: Any) -> dict:
        nid = self.next_id
        self.next_id += 1
        return {"id": nid, "nodeType": node_type, "src": f"{nid}:1:0", **fields}

    def ident(self, name: str, type_string: str = "uint256") -> dict:
        return self.node("Identifier", name=name, typeDescriptions={"typeString": type_string})

    def member(self, expr: dict, name: str, type_string: str = "") -> dict:
        return self.node("MemberAccess", memberName=name, expression=expr, typeDescriptions={"typeString": type_string})

    def msg_sender(self) -> dict:
        return self.member(self.ident("msg", "msg"), "sender", "address")

    def call(self, expr: dict, *args: dict) -> dict:
        return self.node("FunctionCall", kind="functionCall", expression=expr, arguments=list(args))

    def stmt(self, expr: dict) -> dict:
        return self.node("ExpressionStatement", expression=expr)

    def literal(self, value: str) -> dict:
        return self.node("Literal", kind="number", value=value, typeDescriptions={"typeString": f"int_const {value}"})

    def binop(self, left: dict, op: str, right: dict) -> dict:
        return self.node("BinaryOperation", operator=op, leftExpression=left, rightExpression=right)

    def assign(self, left: dict, op: str, right: dict) -> dict:
        return self.stmt(self.node("Assignment", operator=op, leftHandSide=left, rightHandSide=right))

    def balance_of_sender(self) -> dict:
        return self.node(
            "IndexAccess",
            baseExpression=self.ident("balances", "mapping(address => uint256)"),
            indexExpression=self.msg_sender(),
        )

    def block(self, stmts: list[dict]) -> dict:
        return self.node("Block", statements=stmts)

    def function(self, name: str, body: list[dict], modifiers: Sequence[dict] = ()) -> dict:
        return self.node(
            "FunctionDefinition",
            name=name,
            kind="function",
            visibility="public",
            stateMutability="nonpayable",
            implemented=True,
            modifiers=list(modifiers),
            parameters=self.node("ParameterList", parameters=[]),
            returnParameters=self.node("ParameterList", parameters=[]),
            body=self.block(body),
        )


def _filler_statements(b: _AstBuilder, rng: np.random.Generator, n: int) -> list[dict]:
    out = []
    for _ in range(n):
        var = f"v{int(rng.integers(0, 6))}"
        op = ["+", "-", "*"][int(rng.integers(0, 3))]
        out.append(b.assign(b.ident(var), "=", b.binop(b.ident(var), op, b.literal(str(int(rng.integers(1, 9)))))))
    return out


def toy_ast(label: str, rng: np.random.Generator, name: str = "Toy") -> dict:
    b = _AstBuilder()
    body = _filler_statements(b, rng, int(rng.integers(1, 4)))
    modifiers: list[dict] = []
    if label == "ReEn":
        amount = b.ident("amount")
        call = b.call(b.call(b.member(b.member(b.msg_sender(), "call"), "value"), amount))
        cond = b.binop(b.balance_of_sender(), ">=", b.ident("amount"))
        then = b.block([b.stmt(call), b.assign(b.balance_of_sender(), "-=", b.ident("amount"))])
        body.append(b.node("IfStatement", condition=cond, trueBody=then))
    elif label == "LoWc":
        send = b.call(b.member(b.ident("recipient", "address payable"), "send"), b.ident("amount"))
        body.append(b.stmt(send))
    elif label == "AcCl":
        body.append(b.stmt(b.call(b.ident("selfdestruct", "function (address payable)"), b.ident("owner", "address"))))
    else:
        req = b.call(b.ident("require", "function (bool) pure"), b.binop(b.ident("amount"), ">", b.literal("0")))
        body.insert(0, b.stmt(req))
    body.extend(_filler_statements(b, rng, int(rng.integers(0, 3))))
    fn = b.function("run", body, modifiers)
    contract = b.node(
        "ContractDefinition",
        name=name,
        contractKind="contract",
        kind="contract",
        abstract=False,
        fullyImplemented=True,
        linearizedBaseContracts=[1],
        nodes=[fn],
        baseContracts=[],
        documentation=None,
        scope=0,
    )
    pragma = b.node("PragmaDirective", literals=["solidity", "^", "0.8", ".0"])
    return b.node("SourceUnit", absolutePath="toy.sol", nodes=[pragma, contract], exportedSymbols={name: [contract["id"]]})


def _filler(rng: np.random.Generator, n: int) -> list[str | tuple[str, int]]:
    out: list[str | tuple[str, int]] = []
    for _ in range(n):
        if rng.random() < 0.3:
            out.append(("PUSH1", int(rng.integers(0, 256))))
        else:
            out.append(_FILLER[int(rng.integers(0, len(_FILLER)))])
    return out


def toy_bytecode(label: str, rng: np.random.Generator) -> bytes:
    """Dispatcher-shaped bytecode with a class-specific function body."""
    items: list = [("PUSH1", 0x80), ("PUSH1", 0x40), "MSTORE", "CALLVALUE", "DUP1", "ISZERO", ("PUSHL", "ok")]
    items += ["JUMPI", ("PUSH1", 0), "DUP1", "REVERT"]
    items += [("LABEL", "ok"), "POP", ("PUSH1", 0), "CALLDATALOAD", ("PUSH1", 0xE0), "SHR"]
    items += ["DUP1", ("PUSH4", 0x2E1A7D4D), "EQ", ("PUSHL", "fn"), "JUMPI", ("PUSHL", "fallback"), "JUMP"]
    items += [("LABEL", "fn")] + _filler(rng, int(rng.integers(1, 6)))
    if label == "ReEn":
        items += ["CALLER", ("PUSH1", 0), "MSTORE", ("PUSH1", 0), "SLOAD", "DUP1", ("PUSHL", "send"), "JUMPI", "STOP"]
        items += [("LABEL", "send"), ("PUSH1", 0), "DUP1", "DUP1", "DUP1", "CALLVALUE", "CALLER", "GAS", "CALL"]
        items += ["POP", ("PUSH1", 0), "SSTORE", "STOP"]
    elif label == "LoWc":
        items += [("PUSH1", 0), "DUP1", "DUP1", "DUP1", ("PUSH1", 0), "SLOAD", ("PUSH2", 0x08FC), "CALL", "POP", "STOP"]
    elif label == "AcCl":
        items += [("PUSH1", 0), "SLOAD", "ORIGIN", "EQ", ("PUSHL", "kill"), "JUMPI", "STOP"]
        items += [("LABEL", "kill"), ("PUSH1", 0), "SLOAD", "SELFDESTRUCT"]
    else:
        items += [("PUSH1", 1), "SLOAD", ("PUSH1", 1), "ADD", ("PUSH1", 1), "SSTORE", "STOP"]
    items += _filler(rng, int(rng.integers(0, 3)))
    items += [("LABEL", "fallback"), ("PUSH1", 0), "DUP1", "REVERT"]
    return assemble_with_labels(items)


def toy_corpus(
    n_per_class: int,
    classes: Sequence[str] = ("safe", "ReEn", "LoWc", "AcCl"),
    seed: int = 0,
) -> list[dict]:
    """Records of ``{id, label, ast, bytecode}`` interleaved by class."""
    rng = make_rng(seed)
    out = []
    for i in range(n_per_class):
        for label in classes:
            cid = f"toy-{label}-{i:03d}"
            out.append({"id": cid, "label": label, "ast": toy_ast(label, rng, f"C{i}"), "bytecode": toy_bytecode(label, rng)})
    return out


def write_toy_corpus(out_dir: str | Path, records: Sequence[dict], label_source: str = "synthetic") -> Path:
    """Write AST/bytecode files plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "ast").mkdir(parents=True, exist_ok=True)
    (out / "bytecode").mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        ast_rel = f"ast/{r['id']}.json"
        code_rel = f"bytecode/{r['id']}.hex"
        (out / ast_rel).write_text(json.dumps(r["ast"]), encoding="utf-8")
        (out / code_rel).write_text("0x" + r["bytecode"].hex() + "\n", encoding="ascii")
        lines.append(
            json.dumps(
                {
                    "id": r["id"],
                    "ast_path": ast_rel,
                    "bytecode_path": code_rel,
                    "label": r["label"],
                    "label_source": label_source,
                    "solc_version": "0.8.19",
                }
            )
        )
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def main(argv: Sequence[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m dvdet.toy", description="write a synthetic toy corpus")
    parser.add_argument("out", type=Path)
    parser.add_argument("--per-class", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    print(write_toy_corpus(args.out, toy_corpus(args.per_class, seed=args.seed)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
