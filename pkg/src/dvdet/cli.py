"""``dvdet`` command line: stage inspection, training, evaluation and detection.

Every subcommand exits 0 on success. Failures print one line,
``error: <stage>: <message>``, to stderr and exit with 2 (input format),
3 (checkpoint) or 4 (internal invariant).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from dvdet.ast_graph import filter_tree, load_ast, load_rule_sets
from dvdet.cfg import build_cfg, eliminate_dead_blocks, extract_paths
from dvdet.disasm import disassemble, load_code, strip_metadata
from dvdet.embed import embed_node, format_embeddings
from dvdet.errors import CheckpointError, DomainError, InputFormatError
from dvdet.model import (
    DVDet,
    TrainConfig,
    cross_validate,
    evaluate,
    load_model,
    train,
)
from dvdet.nn import save_checkpoint
from dvdet.pipeline import (
    ManifestRecord,
    StageError,
    load_samples,
    prepare_sample,
    read_manifest,
    run_stage,
    select_rules,
    source_graph,
)
from dvdet.report import dumps, pooled_metrics, write_report

log = logging.getLogger("dvdet")

EXIT_OK, EXIT_FORMAT, EXIT_CHECKPOINT, EXIT_INVARIANT = 0, 2, 3, 4

# Config fields that only shape preprocessing; safe to override on a trained model.
PREPROCESS_KEYS = ("mode", "max_paths", "max_blocks", "rule_set", "sibling_edges", "strip_metadata")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # single-line usage errors
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(EXIT_FORMAT)


def _emit(text: str, out_dir: Path | None, name: str) -> None:
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text, encoding="utf-8")


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Flag values that override TOML config keys; unset flags are skipped."""
    mapping = {
        "seed": "seed",
        "epochs": "epochs",
        "mode": "mode",
        "task": "task",
        "folds": "folds",
        "batch_size": "batch_size",
        "max_paths": "max_paths",
        "max_len": "max_blocks",
        "rule_set": "rule_set",
    }
    out = {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}
    if getattr(args, "sibling_edges", False):
        out["sibling_edges"] = True
    if getattr(args, "no_strip_metadata", False):
        out["strip_metadata"] = False
    return out


def _config(args: argparse.Namespace) -> TrainConfig:
    overrides = _overrides(args)
    if args.config is not None:
        return run_stage("config", TrainConfig.from_toml, args.config, **overrides)
    return run_stage("config", TrainConfig.from_dict, overrides)


def _rule_sets(args: argparse.Namespace):
    return run_stage("graph", load_rule_sets, args.rules)


def _code(args: argparse.Namespace, config: TrainConfig) -> bytes:
    code = run_stage("disasm", load_code, args.code)
    return strip_metadata(code) if config.strip_metadata else code


def _instructions(args: argparse.Namespace, config: TrainConfig):
    warnings: list[str] = []
    ins = run_stage("disasm", disassemble, _code(args, config), warnings)
    for w in warnings:
        log.warning("%s", w)
    return ins


def _cfg(args: argparse.Namespace, config: TrainConfig):
    ins = _instructions(args, config)
    return run_stage("cfg", lambda: eliminate_dead_blocks(build_cfg(ins)))


def cmd_disasm(args: argparse.Namespace) -> int:
    config = _config(args)
    ins = _instructions(args, config)
    if args.text:
        _emit("".join(f"{i}\n" for i in ins), args.out, "disasm.txt")
    else:
        lines = (json.dumps(i.to_json(), sort_keys=True) + "\n" for i in ins)
        _emit("".join(lines), args.out, "disasm.jsonl")
    return EXIT_OK


def cmd_cfg(args: argparse.Namespace) -> int:
    config = _config(args)
    cfg = _cfg(args, config)
    dot, doc = cfg.to_dot(), dumps(cfg.to_json())
    sys.stdout.write(dot if args.dot else doc)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "cfg.dot").write_text(dot, encoding="utf-8")
        (args.out / "cfg.json").write_text(doc, encoding="utf-8")
    return EXIT_OK


def cmd_paths(args: argparse.Namespace) -> int:
    config = _config(args)
    cfg = _cfg(args, config)
    paths = run_stage("paths", extract_paths, cfg, config.max_paths, config.max_blocks)
    if args.json:
        rows = [{"block_ids": list(p.block_ids), "opcodes": list(p.opcodes), "truncated": p.truncated} for p in paths]
        _emit(dumps(rows), args.out, "paths.json")
    else:
        _emit("".join(" ".join(p.opcodes) + "\n" for p in paths), args.out, "paths.txt")
    return EXIT_OK


def cmd_graph(args: argparse.Namespace) -> int:
    config = _config(args)
    rules = run_stage("graph", select_rules, _rule_sets(args), config.rule_set)
    graph = source_graph(
        args.ast,
        rules,
        sibling_edges=config.sibling_edges,
        embeddings_path=args.embeddings,
        dim=config.graph_dims[0],
    )
    _emit(dumps(graph.to_json()), args.out, "graph.json")
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    """Node vectors (--dim 768, from an AST) or opcode rows (--dim 350, from bytecode)."""
    if args.dim == 768:
        if args.ast is None:
            raise StageError("embed", "--dim 768 needs --ast")
        tree = filter_tree(run_stage("ast", load_ast, args.ast))
        rows = {n.id: embed_node(n, 768) for n in tree.preorder()}
        _emit(format_embeddings(rows), args.out, "node_embeddings.tsv")
        return EXIT_OK
    if args.code is None:
        raise StageError("embed", "--dim 350 needs --code")
    config = _config(args)
    if args.checkpoint is not None:
        model, store = _load(args.checkpoint)
        table = model.table
    else:
        model = DVDet(config)
        store = model.init_params(config.seed)
        table = model.table
    if table.dim != 350:
        raise StageError("embed", f"checkpoint opcode width is {table.dim}, not 350")
    mnemonics = sorted({i.mnemonic for i in _instructions(args, config)}, key=table.row)
    matrix = table.lookup(store, mnemonics)
    _emit(format_embeddings(dict(zip(mnemonics, matrix))), args.out, "opcode_embeddings.tsv")
    return EXIT_OK


def _load(path: Path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise StageError("checkpoint", f"file not found: {exc.filename}", EXIT_CHECKPOINT) from exc
    except (CheckpointError, OSError) as exc:
        raise StageError("checkpoint", str(exc), EXIT_CHECKPOINT) from exc


def _records(path: Path) -> list[ManifestRecord]:
    return run_stage("manifest", read_manifest, path)


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise StageError(args.command, "--out is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_train(args: argparse.Namespace) -> int:
    out = _require_out(args)
    config = _config(args)
    records = _records(args.manifest)
    samples = load_samples(records, config, _rule_sets(args), args.workers)
    if not samples:
        raise StageError("train", "manifest has no samples")
    meta = {"config": config.to_dict()}
    if config.folds > 1:
        folds = run_stage("train", cross_validate, samples, config)
        rows = {f"fold {f.fold}": f.metrics for f in folds}
        rows["pooled"] = pooled_metrics([f.metrics for f in folds])
        for f in folds:
            save_checkpoint(out / f"fold{f.fold}.ckpt", f.result.store, {**meta, "fold": f.fold, "best_epoch": f.result.best_epoch})
        # the released model is the fold model with the best validation score
        best = min(folds, key=lambda f: (-f.metrics.accuracy, f.metrics.loss, f.fold))
        save_checkpoint(out / "model.ckpt", best.result.store, {**meta, "fold": best.fold, "best_epoch": best.result.best_epoch})
        histories = [f.result.history for f in folds]
        extra = {
            "config": config.to_dict(),
            "folds": [
                {"fold": f.fold, "train_size": f.train_size, "val_size": f.val_size, "best_epoch": f.result.best_epoch}
                for f in folds
            ],
            "model_fold": best.fold,
        }
        confusion_of = "pooled"
    else:
        res = run_stage("train", train, samples, config)
        save_checkpoint(out / "model.ckpt", res.store, {**meta, "best_epoch": None})
        rows = {"train": evaluate(res.model, res.store, samples)}
        histories = [res.history]
        extra = {"config": config.to_dict(), "folds": [], "model_fold": None}
        confusion_of = "train"
    (out / "history.json").write_text(dumps(histories), encoding="utf-8")
    write_report(out, rows, extra, histories, confusion_of)
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _trained_config(model_config: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    over = {k: v for k, v in _overrides(args).items() if k in PREPROCESS_KEYS}
    return replace(model_config, **over) if over else model_config


def cmd_eval(args: argparse.Namespace) -> int:
    model, store = _load(args.checkpoint)
    config = run_stage("config", _trained_config, model.config, args)
    model.config = config
    samples = load_samples(_records(args.manifest), config, _rule_sets(args), args.workers)
    if not samples:
        raise StageError("eval", "manifest has no samples")
    metrics = run_stage("eval", evaluate, model, store, samples)
    if args.out is not None:
        write_report(args.out, {"eval": metrics}, {"config": config.to_dict(), "checkpoint": args.checkpoint.name})
    sys.stdout.write(dumps(metrics.to_dict()))
    return EXIT_OK


def predict_record(model: DVDet, store, record: ManifestRecord, rule_sets) -> dict[str, Any]:
    """Run both pipelines on one contract and return the prediction record."""
    sample = prepare_sample(record, model.config, rule_sets, require_label=False)
    p, (g_norm, s_norm) = run_stage("fuse", model.predict, store, sample)
    classes = list(model.config.classes)
    assert abs(float(np.sum(p)) - 1.0) < 1e-6, "probabilities do not sum to 1"
    return {
        "id": record.id,
        "task": model.config.task,
        "classes": classes,
        "probabilities": [float(x) for x in p],
        "label": classes[int(np.argmax(p))],
        "view_norms": {"graph": g_norm, "sequence": s_norm},
    }


def cmd_detect(args: argparse.Namespace) -> int:
    model, store = _load(args.checkpoint)
    model.config = run_stage("config", _trained_config, model.config, args)
    if args.ast is None and args.bytecode is None:
        raise StageError("detect", "give --ast and/or --bytecode")
    cid = args.id or (args.bytecode or args.ast).stem
    record = ManifestRecord(cid, args.ast, args.bytecode, None)
    pred = predict_record(model, store, record, _rule_sets(args))
    _emit(dumps(pred), args.out, "prediction.json")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    model, store = _load(args.checkpoint)
    model.config = run_stage("config", _trained_config, model.config, args)
    records = _records(args.manifest)
    if not records:
        log.warning("manifest %s is empty", args.manifest)
    rule_sets = _rule_sets(args)
    rows = []
    total = 0.0
    for record in records:
        t0 = time.perf_counter()
        row: dict[str, Any] = {"id": record.id}
        try:
            row["label"] = predict_record(model, store, record, rule_sets)["label"]
        except StageError as exc:
            row["error"] = str(exc)
        row["seconds"] = time.perf_counter() - t0
        total += row["seconds"]
        rows.append(row)
    report = {
        "contracts": rows,
        "n": len(rows),
        "total_seconds": total,
        "unit_seconds": total / len(rows) if rows else None,
    }
    _emit(dumps(report), args.out, "bench.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file with training/preprocessing keys")
    common.add_argument("--out", type=Path, help="directory for output artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--max-paths", type=int)
    common.add_argument("--max-len", type=int, help="maximum blocks per control-flow path")
    common.add_argument("--no-strip-metadata", action="store_true")
    common.add_argument("--rules", type=Path, help="rule-set file (JSON or TOML)")
    common.add_argument("--rule-set", help="rule set name, or 'all'")
    common.add_argument("--sibling-edges", action="store_true")
    common.add_argument("--mode", choices=("dual", "source-only", "bytecode-only"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dvdet", description="dual-view smart contract vulnerability detection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("disasm", parents=[common], help="disassemble bytecode to JSON lines")
    p.add_argument("code", type=Path)
    p.add_argument("--text", action="store_true", help="human-readable listing instead")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("cfg", parents=[common], help="control-flow graph as JSON or DOT")
    p.add_argument("code", type=Path)
    p.add_argument("--dot", action="store_true")
    p.set_defaults(func=cmd_cfg)

    p = sub.add_parser("paths", parents=[common], help="control-flow paths, one opcode sequence per line")
    p.add_argument("code", type=Path)
    p.add_argument("--json", action="store_true", help="block ids and truncation flags as JSON")
    p.set_defaults(func=cmd_paths)

    p = sub.add_parser("graph", parents=[common], help="weighted code graph from a solc AST")
    p.add_argument("ast", type=Path)
    p.add_argument("--embeddings", type=Path, help="external node vectors (id<TAB>floats)")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("embed", parents=[common], help="node or opcode embeddings")
    p.add_argument("--dim", type=int, choices=(350, 768), required=True)
    p.add_argument("--ast", type=Path)
    p.add_argument("--code", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], help="train with k-fold cross-validation")
    p.add_argument("manifest", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--task", choices=("existence", "type"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="classify one contract")
    p.add_argument("--ast", type=Path)
    p.add_argument("--bytecode", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--id")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", parents=[common], help="per-contract detection timing")
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except StageError as exc:
        code, stage, msg = exc.exit_code, exc.stage, exc.message
    except CheckpointError as exc:
        code, stage, msg = EXIT_CHECKPOINT, "checkpoint", str(exc)
    except (InputFormatError, DomainError) as exc:
        code, stage, msg = EXIT_FORMAT, args.command, str(exc)
    except AssertionError as exc:
        code, stage, msg = EXIT_INVARIANT, args.command, f"invariant violated: {exc}"
    except FileNotFoundError as exc:
        code, stage, msg = EXIT_FORMAT, args.command, f"file not found: {exc.filename}"
    except Exception as exc:  # anything else is a bug, reported as an invariant failure
        code, stage, msg = EXIT_INVARIANT, args.command, f"{type(exc).__name__}: {exc}"
    msg = " ".join(str(msg).split())
    sys.stderr.write(f"error: {stage}: {msg}\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
