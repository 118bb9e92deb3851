from __future__ import annotations

import numpy as np
import pytest

from dvdet.ast_graph import build_weighted_graph, filter_tree, load_rule_sets, parse_ast
from dvdet.cfg import build_cfg, eliminate_dead_blocks, extract_paths
from dvdet.disasm import disassemble
from dvdet.model import Sample, TrainConfig
from dvdet.toy import toy_corpus
from criteria import RESULTS


def make_samples(records, config: TrainConfig, rules=None) -> list[Sample]:
    rules = rules or load_rule_sets()[config.rule_set]
    out = []
    for r in records:
        tree = filter_tree(parse_ast(r["ast"]))
        graph = build_weighted_graph(tree, rules)
        cfg = eliminate_dead_blocks(build_cfg(disassemble(r["bytecode"])))
        paths = extract_paths(cfg, config.max_paths, config.max_blocks)
        out.append(Sample(r["id"], graph, paths, config.label_index(r["label"]), "synthetic"))
    return out


@pytest.fixture(scope="session")
def rule_sets():
    return load_rule_sets()


@pytest.fixture(scope="session")
def toy_records():
    return toy_corpus(2)


@pytest.fixture(scope="session")
def small_config() -> TrainConfig:
    return TrainConfig(graph_dims=(768, 6, 5), seq_dims=(350, 6, 5), epochs=2, batch_size=4, dropout=0.0)


@pytest.fixture(scope="session")
def toy_samples(toy_records, small_config):
    return make_samples(toy_records, small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
