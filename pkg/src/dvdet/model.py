"""Dual-view fusion classifier, training loop and metrics."""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from dvdet.ast_graph import WeightedCodeGraph
from dvdet.cfg import DEFAULT_MAX_BLOCKS, DEFAULT_MAX_PATHS, ControlFlowPath
from dvdet.egat import DEFAULT_DIMS as GRAPH_DIMS
from dvdet.egat import Egat, graph_readout
from dvdet.embed import EmbeddingTable
from dvdet.errors import CheckpointError, DomainError, InputFormatError
from dvdet.hyperagru import DEFAULT_DIMS as SEQ_DIMS
from dvdet.hyperagru import POOL_MODES, HyperAGRU, TokenTrie, pool_paths, pool_paths_backward
from dvdet.nn import (
    DTYPE,
    ParamStore,
    adam_step,
    cosine_lr,
    cross_entropy,
    glorot_uniform,
    load_checkpoint,
    make_rng,
    one_hot,
    save_checkpoint,
    softmax,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MODES = ("dual", "source-only", "bytecode-only")
TASKS = ("existence", "type")
TYPE_CLASSES = ("safe", "ReEn", "LoWc", "AcCl")
EXISTENCE_CLASSES = ("safe", "vulnerable")


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "dual"
    task: str = "type"
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 0.01
    dropout: float = 0.5
    graph_dims: tuple[int, ...] = GRAPH_DIMS
    seq_dims: tuple[int, ...] = SEQ_DIMS
    classes: tuple[str, ...] = ()
    folds: int = 3
    max_paths: int = DEFAULT_MAX_PATHS
    max_blocks: int = DEFAULT_MAX_BLOCKS
    path_pool: str = "mean"
    rule_set: str = "ReEn"
    sibling_edges: bool = False
    strip_metadata: bool = True

    def __post_init__(self) -> None:
        self.graph_dims = tuple(int(d) for d in self.graph_dims)
        self.seq_dims = tuple(int(d) for d in self.seq_dims)
        if not self.classes:
            self.classes = TYPE_CLASSES if self.task == "type" else EXISTENCE_CLASSES
        self.classes = tuple(self.classes)
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise DomainError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.path_pool not in POOL_MODES:
            raise DomainError(f"path_pool must be one of {POOL_MODES}")
        if len(self.classes) < 2:
            raise DomainError("need at least two classes")
        if self.epochs < 0 or self.batch_size < 1 or self.folds < 1:
            raise DomainError("epochs >= 0, batch_size >= 1 and folds >= 1 required")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputFormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_toml(cls, path: str | Path, **overrides: Any) -> TrainConfig:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise InputFormatError(f"{path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for key in ("graph_dims", "seq_dims", "classes"):
            d[key] = list(d[key])
        return d

    def label_index(self, label: str | int) -> int:
        if isinstance(label, bool):
            raise InputFormatError(f"bad label {label!r}")
        if isinstance(label, int):
            if not 0 <= label < len(self.classes):
                raise InputFormatError(f"label {label} out of range for {len(self.classes)} classes")
            return label
        if label in self.classes:
            return self.classes.index(label)
        if self.task == "existence":
            # type names collapse onto "vulnerable"
            return 0 if label == self.classes[0] else 1
        raise InputFormatError(f"unknown label {label!r}; classes are {list(self.classes)}")


@dataclass
class Sample:
    contract_id: str
    graph: WeightedCodeGraph | None
    paths: list[ControlFlowPath]
    label: int
    label_source: str = ""


@dataclass
class FusionParams:
    W: np.ndarray  # (graph dim + seq dim) x classes
    b: np.ndarray


def fuse_predict(x_graph: np.ndarray, h_seq: np.ndarray, params: FusionParams) -> np.ndarray:
    """Class probabilities from the concatenated view vectors."""
    v = np.concatenate([np.asarray(x_graph, dtype=DTYPE), np.asarray(h_seq, dtype=DTYPE)])
    if params.W.shape != (v.size, params.b.size):
        raise DomainError(f"fusion weights {params.W.shape} do not fit input {v.size} and {params.b.size} classes")
    return softmax(v @ params.W + params.b)


def loss(p: np.ndarray, y: int) -> float:
    return cross_entropy(p, one_hot(int(y), len(p)))


def batch_loss(ps: Sequence[np.ndarray], ys: Sequence[int]) -> float:
    return float(np.mean([loss(p, y) for p, y in zip(ps, ys)]))


class DVDet:
    """The dual-view detector: E-GAT over the code graph, HyperAGRU over
    control-flow paths, and a softmax classifier over their concatenation.

    Every parameter exists in every mode; a view that is switched off (or
    missing for a sample) contributes a zero vector of its width.
    """

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self.egat = Egat(config.graph_dims, dropout=config.dropout)
        self.gru = HyperAGRU(config.seq_dims, dropout=config.dropout)
        self.table = EmbeddingTable(dim=config.seq_dims[0])
        self.n_classes = len(config.classes)
        self.fusion_in = self.egat.out_dim + self.gru.out_dim
        self._shapes: dict[str, tuple[int, ...]] | None = None

    @property
    def graph_param_names(self) -> list[str]:
        return self.egat.param_names()

    @property
    def seq_param_names(self) -> list[str]:
        return self.gru.param_names() + [self.table.param_name]

    def init_params(self, seed: int | None = None) -> ParamStore:
        rng = make_rng(self.config.seed if seed is None else seed)
        store = ParamStore()
        self.egat.init_params(store, rng)
        self.table.init_params(store, rng)
        self.gru.init_params(store, rng)
        store.add("fusion.W", glorot_uniform(rng, (self.fusion_in, self.n_classes), self.fusion_in, self.n_classes))
        store.add("fusion.b", np.zeros(self.n_classes))
        return store

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self._shapes is None:
            self._shapes = {name: p.value.shape for name, p in self.init_params(0).items()}
        return self._shapes

    def check_store(self, store: ParamStore) -> None:
        expected = self.param_shapes()
        for name, shape in expected.items():
            if name not in store:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            if store.value(name).shape != shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {store.value(name).shape}, model expects {shape}"
                )
        extra = set(store.names()) - set(expected)
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")

    def fusion_params(self, store: ParamStore) -> FusionParams:
        return FusionParams(store.value("fusion.W"), store.value("fusion.b"))

    def uses_graph(self, sample: Sample) -> bool:
        return self.config.mode != "bytecode-only" and sample.graph is not None and sample.graph.n_nodes > 0

    def uses_paths(self, sample: Sample) -> bool:
        return self.config.mode != "source-only" and any(p.opcodes for p in sample.paths)

    def forward_batch(
        self,
        store: ParamStore,
        samples: Sequence[Sample],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[list[np.ndarray], dict]:
        """Class probabilities for each sample.

        All control-flow paths of the batch go through the sequence encoder
        together; results match encoding each sample on its own.
        """
        g_dim, s_dim = self.egat.out_dim, self.gru.out_dim
        V = np.zeros((len(samples), g_dim + s_dim))
        graph_caches: dict[int, tuple] = {}
        for k, sample in enumerate(samples):
            if self.uses_graph(sample):
                nodes, gcache = self.egat.forward(store, sample.graph, sample.graph.features, training, rng)
                V[k, :g_dim] = graph_readout(nodes)
                graph_caches[k] = (gcache, nodes.shape[0])
        owners: list[int] = []
        token_rows: list[np.ndarray] = []
        for k, sample in enumerate(samples):
            if self.uses_paths(sample):
                for path in sample.paths:
                    if path.opcodes:
                        owners.append(k)
                        token_rows.append(self.table.rows(path.opcodes))
        seq_cache = None
        groups: dict[int, list[int]] = {}
        if token_rows:
            trie = TokenTrie.build(token_rows)
            X = store.value(self.table.param_name)[trie.tokens]
            vecs, fcache = self.gru.forward_forest(store, X, trie.parent, trie.chains, training, rng)
            for j, k in enumerate(owners):
                groups.setdefault(k, []).append(j)
            for k, js in groups.items():
                V[k, g_dim:] = pool_paths([vecs[j] for j in js], self.config.path_pool)
            seq_cache = (fcache, trie.tokens, np.vstack(vecs))
        logits = V @ store.value("fusion.W") + store.value("fusion.b")
        ps = [softmax(row) for row in logits]
        norms = [
            (float(np.linalg.norm(v[:g_dim])), float(np.linalg.norm(v[g_dim:]))) for v in V
        ]
        return ps, {"V": V, "graph": graph_caches, "paths": seq_cache, "groups": groups, "norms": norms}

    def backward_batch(self, store: ParamStore, cache: dict, dlogits: Sequence[np.ndarray]) -> None:
        V = cache["V"]
        D = np.vstack(dlogits)
        store.accumulate("fusion.W", V.T @ D)
        store.accumulate("fusion.b", D.sum(axis=0))
        dV = D @ store.value("fusion.W").T
        g_dim = self.egat.out_dim
        for k, (gcache, n) in cache["graph"].items():
            self.egat.backward(store, gcache, np.tile(dV[k, :g_dim] / n, (n, 1)))
        if cache["paths"] is not None:
            fcache, tokens, vecs = cache["paths"]
            dvecs: list = [None] * len(vecs)
            for k, js in cache["groups"].items():
                dpool = pool_paths_backward(vecs[js], self.config.path_pool, dV[k, g_dim:])
                for j, d in zip(js, dpool):
                    dvecs[j] = d
            dX = self.gru.backward_forest(store, fcache, dvecs)
            self.table.backward(store, tokens, dX)

    def forward(
        self,
        store: ParamStore,
        sample: Sample,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict]:
        ps, cache = self.forward_batch(store, [sample], training, rng)
        cache["norms"] = cache["norms"][0]
        return ps[0], cache

    def backward(self, store: ParamStore, cache: dict, dlogits: np.ndarray) -> None:
        self.backward_batch(store, cache, [dlogits])

    def sample_loss(self, store: ParamStore, sample: Sample, training: bool = False, rng=None) -> float:
        p, _ = self.forward(store, sample, training, rng)
        return loss(p, sample.label)

    def batch_loss(self, store: ParamStore, samples: Sequence[Sample]) -> float:
        ps, _ = self.forward_batch(store, samples)
        return batch_loss(ps, [s.label for s in samples])

    def accumulate_gradients(
        self,
        store: ParamStore,
        batch: Sequence[Sample],
        training: bool = True,
        rng: np.random.Generator | None = None,
    ) -> float:
        """Add d(mean batch loss)/d(params) into the store's gradients."""
        ps, cache = self.forward_batch(store, batch, training, rng)
        scale = 1.0 / len(batch)
        dlogits = [(p - one_hot(s.label, self.n_classes)) * scale for p, s in zip(ps, batch)]
        self.backward_batch(store, cache, dlogits)
        return batch_loss(ps, [s.label for s in batch])

    def predict(self, store: ParamStore, sample: Sample) -> tuple[np.ndarray, tuple[float, float]]:
        p, cache = self.forward(store, sample, training=False)
        return p, cache["norms"]


@dataclass
class Metrics:
    classes: tuple[str, ...]
    confusion: list[list[int]]
    accuracy: float
    recall: list[float | None]
    # one-vs-rest accuracy per class
    class_accuracy: list[float]
    # vulnerable-vs-safe accuracy when class 0 is "safe"
    existence_accuracy: float | None
    loss: float | None = None

    @property
    def n(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": list(self.classes),
            "n": self.n,
            "accuracy": self.accuracy,
            "recall": {c: r for c, r in zip(self.classes, self.recall)},
            "class_accuracy": {c: a for c, a in zip(self.classes, self.class_accuracy)},
            "existence_accuracy": self.existence_accuracy,
            "loss": self.loss,
            "confusion": self.confusion,
        }


def metrics_from_confusion(
    confusion: np.ndarray | Sequence[Sequence[int]], classes: Sequence[str], loss_value: float | None = None
) -> Metrics:
    """Metrics from a confusion matrix with true classes on rows."""
    C = np.asarray(confusion, dtype=np.int64)
    total = int(C.sum())
    if total == 0:
        raise DomainError("metrics of an empty evaluation set")
    support = C.sum(axis=1)
    tp = np.diag(C)
    recall = [float(tp[i] / support[i]) if support[i] else None for i in range(len(C))]
    class_acc = []
    for i in range(len(C)):
        fp = C[:, i].sum() - tp[i]
        fn = support[i] - tp[i]
        class_acc.append(float((total - fp - fn) / total))
    existence = None
    if classes and classes[0] == "safe":
        # safe predicted safe plus vulnerable predicted as any vulnerable class
        existence = float((C[0, 0] + C[1:, 1:].sum()) / total)
    return Metrics(tuple(classes), C.tolist(), float(tp.sum() / total), recall, class_acc, existence, loss_value)


def evaluate(model: DVDet, store: ParamStore, samples: Sequence[Sample], batch_size: int = 64) -> Metrics:
    """Eval-mode metrics over ``samples`` (dropout off)."""
    model.check_store(store)
    k = model.n_classes
    C = np.zeros((k, k), dtype=np.int64)
    losses = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        ps, _ = model.forward_batch(store, chunk)
        for s, p in zip(chunk, ps):
            C[s.label, int(np.argmax(p))] += 1
            losses.append(loss(p, s.label))
    return metrics_from_confusion(C, model.config.classes, float(np.mean(losses)))


def kfold_indices(labels: Sequence[int], k: int = 3, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Stratified k-fold split as (train, validation) index lists.

    Indices are shuffled within each class, the classes are laid end to end,
    and position i goes to fold i mod k, so earlier folds get the remainder.
    """
    if k < 2:
        raise DomainError("k-fold needs k >= 2")
    if len(labels) < k:
        raise DomainError(f"{len(labels)} samples cannot fill {k} folds")
    rng = make_rng(seed)
    ordered: list[int] = []
    for cls in sorted(set(labels)):
        idx = [i for i, y in enumerate(labels) if y == cls]
        ordered.extend(int(i) for i in rng.permutation(idx))
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, i in enumerate(ordered):
        folds[pos % k].append(i)
    out = []
    for f in range(k):
        val = sorted(folds[f])
        held = set(val)
        out.append(([i for i in range(len(labels)) if i not in held], val))
    return out


def kfold_split(samples: Sequence[Sample], k: int = 3, seed: int = 0) -> list[tuple[list[Sample], list[Sample]]]:
    parts = kfold_indices([s.label for s in samples], k, seed)
    return [([samples[i] for i in tr], [samples[i] for i in va]) for tr, va in parts]


@dataclass
class TrainResult:
    store: ParamStore
    history: list[dict]
    best_epoch: int | None
    model: DVDet


def _better(metrics: Metrics, best: tuple[float, float] | None) -> bool:
    if best is None:
        return True
    acc, loss_value = best
    return metrics.accuracy > acc or (metrics.accuracy == acc and metrics.loss < loss_value)


def train(
    samples: Sequence[Sample],
    config: TrainConfig,
    val_samples: Sequence[Sample] | None = None,
    *,
    checkpoint_path: str | Path | None = None,
    store: ParamStore | None = None,
) -> TrainResult:
    """Adam with cosine annealing over shuffled mini-batches.

    With validation samples the returned parameters are those of the best
    validation epoch (accuracy, then lower loss); otherwise the final ones.
    """
    if not samples:
        raise DomainError("empty training set")
    model = DVDet(config)
    store = model.init_params() if store is None else store
    rng = make_rng(config.seed + 1)
    n_batches = math.ceil(len(samples) / config.batch_size)
    total_steps = max(1, config.epochs * n_batches)
    history: list[dict] = []
    best_store, best_key, best_epoch = None, None, None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        lr = config.lr0
        for b in range(n_batches):
            batch = [samples[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            store.zero_grad()
            epoch_loss += model.accumulate_gradients(store, batch, True, rng) * len(batch)
            lr = cosine_lr(step, total_steps, config.lr0)
            adam_step(store, lr, step + 1)
            step += 1
        record: dict[str, Any] = {"epoch": epoch + 1, "train_loss": epoch_loss / len(samples), "lr": lr}
        if val_samples:
            m = evaluate(model, store, val_samples)
            record["val"] = m.to_dict()
            if _better(m, best_key):
                best_key = (m.accuracy, m.loss)
                best_store, best_epoch = store.copy(), epoch + 1
        history.append(record)
        log.info("epoch %d loss %.4f", epoch + 1, record["train_loss"])
    final = best_store if best_store is not None else store
    final.zero_grad()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, final, {"config": config.to_dict(), "best_epoch": best_epoch})
    return TrainResult(final, history, best_epoch, model)


@dataclass
class FoldResult:
    fold: int
    train_size: int
    val_size: int
    result: TrainResult
    metrics: Metrics


def cross_validate(samples: Sequence[Sample], config: TrainConfig) -> list[FoldResult]:
    out = []
    for f, (tr, va) in enumerate(kfold_split(samples, config.folds, config.seed)):
        res = train(tr, config, va)
        out.append(FoldResult(f, len(tr), len(va), res, evaluate(res.model, res.store, va)))
    return out


def load_model(path: str | Path) -> tuple[DVDet, ParamStore]:
    store, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (InputFormatError, DomainError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config in checkpoint: {exc}") from exc
    model = DVDet(config)
    model.check_store(store)
    return model, store
