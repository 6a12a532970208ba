"""Optimizer, training loop, task heads and evaluation metrics."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .backbone import IDENTITY_HOOKS, Model, build_model, model_forward, pair_logits
from .errors import ConfigError, EmptyBatchError, MetricError, NumericError, SamplingError
from .hetgraph import EDGE_SPLIT, NODE_SPLIT, HeteroGraph, SplitSpec, node_features, split_edges, split_labels
from .regularizers import GradRegConfig, make_hooks, run_epoch

log = logging.getLogger(__name__)

TASKS = ("node_classification", "link_prediction")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[T.Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    grads = [np.zeros(p.shape) if g is None else g for p, g in zip(params, grads)]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ConfigError(f"gradient {i} is {g.shape} for a parameter of shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for parameter {i} (shape {p.shape}) at Adam step {state.step_count + 1}"
            )
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, params: Sequence[T.Tensor]) -> None:
        adam_step(params, [p.grad for p in params], self.state)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    loss: float
    micro_f1: float | None = None
    macro_f1: float | None = None
    auc_roc: float | None = None

    @property
    def primary(self) -> float:
        return self.micro_f1 if self.micro_f1 is not None else self.auc_roc  # type: ignore[return-value]


def f1_scores(pred, truth, K: int) -> tuple[float, float]:
    """Micro and macro F1; a class absent from both sequences scores 0 in the macro mean."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise MetricError("F1 of an empty prediction set")
    if pred.size != truth.size:
        raise MetricError(f"{pred.size} predictions for {truth.size} labels")
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= K:
        raise MetricError(f"class index outside [0, {K})")
    tp = np.bincount(truth[pred == truth], minlength=K).astype(np.float64)
    n_pred = np.bincount(pred, minlength=K)
    n_true = np.bincount(truth, minlength=K)
    denom = n_pred + n_true
    per_class = np.divide(2 * tp, denom, out=np.zeros(K), where=denom > 0)
    micro = float(tp.sum() / pred.size)
    return micro, float(per_class.mean())


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.size != y.size:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def negative_sample(g: HeteroGraph, positives, n: int, seed: int) -> np.ndarray:
    """``n`` distinct unordered node pairs that are neither edges of ``g`` nor positives."""
    if g.p < 2:
        raise SamplingError("negative sampling needs at least two nodes")
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    p = g.p
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    us = np.concatenate([g.src, pos[:, 0]])
    vs = np.concatenate([g.dst, pos[:, 1]])
    off = us != vs
    excluded = np.unique(np.minimum(us, vs)[off] * p + np.maximum(us, vs)[off])
    available = p * (p - 1) // 2 - excluded.size
    if n > available:
        raise SamplingError(f"asked for {n} negatives but only {available} non-edges exist")
    rng = np.random.default_rng(seed)
    if n > available // 2:
        lo, hi = np.triu_indices(p, k=1)
        keys = np.setdiff1d(lo * p + hi, excluded)
        chosen = np.sort(rng.choice(keys, size=n, replace=False))
    else:
        chosen_set: list[int] = []
        seen = set(excluded.tolist())
        while len(chosen_set) < n:
            u = rng.integers(0, p, size=2 * (n - len(chosen_set)) + 8)
            v = rng.integers(0, p, size=u.size)
            for a, b in zip(u, v):
                if a == b:
                    continue
                key = int(min(a, b) * p + max(a, b))
                if key not in seen:
                    seen.add(key)
                    chosen_set.append(key)
                    if len(chosen_set) == n:
                        break
        chosen = np.array(chosen_set, dtype=np.int64)
    return np.stack([chosen // p, chosen % p], axis=1)


# ---------------------------------------------------------------------------
# tasks


@dataclass
class NodeTask:
    labels: np.ndarray
    num_classes: int
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray

    @classmethod
    def from_graph(cls, g: HeteroGraph, spec: SplitSpec = NODE_SPLIT) -> NodeTask:
        train, valid, test = split_labels(g, spec)
        return cls(np.array(g.labels), g.num_classes, train, valid, test)

    def mask(self, idx) -> np.ndarray:
        m = np.zeros(self.labels.size, dtype=bool)
        m[idx] = True
        return m


@dataclass
class LinkTask:
    graph: HeteroGraph
    train_pos: np.ndarray
    valid_pos: np.ndarray
    valid_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray

    @classmethod
    def from_graph(cls, g: HeteroGraph, spec: SplitSpec = EDGE_SPLIT) -> LinkTask:
        split = split_edges(g, spec)
        all_pos = np.concatenate([split.train_pos, split.valid_pos, split.test_pos])
        # One 1:1 negative draw per split, tied to the split seed.
        neg = negative_sample(g, all_pos, split.valid_pos.shape[0] + split.test_pos.shape[0], spec.seed)
        nv = split.valid_pos.shape[0]
        return cls(split.graph, split.train_pos, split.valid_pos, neg[:nv], split.test_pos, neg[nv:])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.001
    seed: int = 0
    task: str = "node_classification"
    layers: int = 1
    hidden_dim: int = 32
    backbone: str = "rgcn"
    regularizer: GradRegConfig = GradRegConfig()
    eval_every: int = 5
    embedding_dim: int = 32
    select_best: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.backbone not in ("rgcn", "rgat"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.lr <= 0 or self.hidden_dim < 1 or self.eval_every < 1 or self.embedding_dim < 1:
            raise ConfigError("lr, hidden_dim, eval_every and embedding_dim must be positive")

    def with_regularizer(self, **changes) -> TrainConfig:
        return replace(self, regularizer=replace(self.regularizer, **changes))


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    valid_loss: float | None
    valid_metric: float | None
    grad_l1: float
    grad_l2: float


TRACE_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_metric", "grad_l1", "grad_l2")


def message_graph(g: HeteroGraph, task) -> HeteroGraph:
    return task.graph if isinstance(task, LinkTask) else g


def make_loss_fn(task, rng: np.random.Generator | None = None):
    """Training loss closure; link tasks draw fresh 1:1 negatives from ``rng``."""
    if isinstance(task, NodeTask):
        mask = task.mask(task.train_idx)
        labels = np.where(task.labels >= 0, task.labels, 0)
        return lambda out: T.softmax_cross_entropy(out, labels, mask)
    pos = task.train_pos
    p = task.graph.p
    if rng is None:
        rng = np.random.default_rng(0)
    neg = np.stack([rng.integers(0, p, pos.shape[0]), rng.integers(0, p, pos.shape[0])], axis=1)
    pairs = np.concatenate([pos, neg])
    targets = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    return lambda out: T.bce_with_logits(pair_logits(out, pairs), targets)


def evaluate(model: Model, g: HeteroGraph, F: T.Tensor, task, split: str = "test") -> Metrics:
    """Metrics with every regularizer hook disabled."""
    out = model_forward(F, message_graph(g, task), model, IDENTITY_HOOKS)
    if isinstance(task, NodeTask):
        idx = getattr(task, f"{split}_idx")
        if idx.size == 0:
            raise EmptyBatchError(f"{split} split is empty")
        labels = np.where(task.labels >= 0, task.labels, 0)
        loss = T.softmax_cross_entropy(out, labels, task.mask(idx)).item()
        pred = out.data[idx].argmax(axis=1)
        micro, macro = f1_scores(pred, task.labels[idx], task.num_classes)
        return Metrics(loss, micro_f1=micro, macro_f1=macro)
    pos, neg = getattr(task, f"{split}_pos"), getattr(task, f"{split}_neg")
    pairs = np.concatenate([pos, neg])
    targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    logits = pair_logits(out, pairs)
    loss = T.bce_with_logits(logits, targets).item()
    return Metrics(loss, auc_roc=auc_roc(logits.data[:, 0], targets))


def features_tensor(g: HeteroGraph, seed: int = 0) -> T.Tensor:
    return T.constant(node_features(g, seed))


def new_model(g: HeteroGraph, config: TrainConfig, d_in: int, task=None) -> Model:
    if config.task == "node_classification":
        out_dim = task.num_classes if task is not None else g.num_classes
    else:
        out_dim = config.embedding_dim
    return build_model(
        config.backbone, d_in, config.hidden_dim, out_dim, g.relation_count, config.layers, config.seed, config.task
    )


def train(model: Model, g: HeteroGraph, config: TrainConfig, task, F: T.Tensor | None = None, hooks=None):
    """Train for ``config.epochs`` epochs; returns the model and its per-epoch trace.

    The final-epoch parameters are kept unless ``config.select_best`` is set, in
    which case the parameters with the best validation metric are restored.
    """
    if F is None:
        F = features_tensor(g)
    mg = message_graph(g, task)
    if hooks is None:
        hooks = make_hooks(config.regularizer, seed=config.seed)
    optimizer = Adam(lr=config.lr)
    neg_rng = np.random.default_rng([config.seed, 5])
    trace: list[TraceRow] = []
    best = (-np.inf, None)
    for epoch in range(1, config.epochs + 1):
        loss_fn = make_loss_fn(task, neg_rng)
        res = run_epoch(model, mg, F, loss_fn, hooks, optimizer)
        valid_loss = valid_metric = None
        if epoch % config.eval_every == 0:
            m = evaluate(model, g, F, task, "valid")
            valid_loss, valid_metric = m.loss, m.primary
            if config.select_best and valid_metric > best[0]:
                best = (valid_metric, model.snapshot())
        trace.append(TraceRow(epoch, res.loss, valid_loss, valid_metric, res.grad_l1, res.grad_l2))
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6f", epoch, res.loss)
    if config.select_best and best[1] is not None:
        model.load(best[1])
    return model, trace


@dataclass
class RunResult:
    model: Model
    trace: list
    test: Metrics
    task: object = None


def fit(g: HeteroGraph, config: TrainConfig, task=None, F: T.Tensor | None = None) -> RunResult:
    """Split (if needed), build, train and test one model."""
    if task is None:
        split_seed = config.seed
        if config.task == "node_classification":
            task = NodeTask.from_graph(g, replace(NODE_SPLIT, seed=split_seed))
        else:
            task = LinkTask.from_graph(g, replace(EDGE_SPLIT, seed=split_seed))
    if F is None:
        F = features_tensor(g)
    model = new_model(g, config, F.cols, task)
    model, trace = train(model, g, config, task, F)
    return RunResult(model, trace, evaluate(model, g, F, task, "test"), task)
