"""RGCN and RGAT message-passing layers that materialize the message matrix.

Each layer first builds one message row per directed edge (the ``k x d_out``
message matrix), hands it to the regularizer hooks, and only then aggregates it
into the target nodes. That ordering is what lets a regularizer perturb or mask
messages and receive gradients with respect to them.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .errors import DimensionError, GraphIndexError, ShapeError
from .hetgraph import HeteroGraph
from .tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


@dataclass
class RgcnLayer:
    weights: list[Tensor]
    self_weight: Tensor
    kind: str = field(default="rgcn", init=False)

    @classmethod
    def init(cls, d_in: int, d_out: int, relation_count: int, rng: np.random.Generator) -> RgcnLayer:
        return cls([glorot(rng, d_in, d_out) for _ in range(relation_count)], glorot(rng, d_in, d_out))

    @property
    def d_in(self) -> int:
        return self.self_weight.rows

    @property
    def d_out(self) -> int:
        return self.self_weight.cols

    def parameters(self) -> list[Tensor]:
        return [*self.weights, self.self_weight]


@dataclass
class RgatLayer:
    weights: list[Tensor]
    self_weight: Tensor
    att_src: Tensor  # relation_count x d_out
    att_dst: Tensor
    slope: float = 0.2
    kind: str = field(default="rgat", init=False)

    @classmethod
    def init(cls, d_in: int, d_out: int, relation_count: int, rng: np.random.Generator) -> RgatLayer:
        weights = [glorot(rng, d_in, d_out) for _ in range(relation_count)]
        self_weight = glorot(rng, d_in, d_out)
        att_src = glorot(rng, d_out, 1, shape=(relation_count, d_out))
        att_dst = glorot(rng, d_out, 1, shape=(relation_count, d_out))
        return cls(weights, self_weight, att_src, att_dst)

    @property
    def d_in(self) -> int:
        return self.self_weight.rows

    @property
    def d_out(self) -> int:
        return self.self_weight.cols

    def parameters(self) -> list[Tensor]:
        return [*self.weights, self.self_weight, self.att_src, self.att_dst]


Layer = Union[RgcnLayer, RgatLayer]


@dataclass
class MessageMatrix:
    """One message row per directed edge, rows in the graph's edge order."""

    matrix: Tensor
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    attention: Tensor | None = None

    @property
    def k(self) -> int:
        return self.matrix.rows


class RegularizerHooks:
    """Identity hooks; regularizers override one or both methods."""

    training = True

    def on_features(self, F: Tensor) -> Tensor:
        return F

    def on_messages(self, msg: MessageMatrix, layer_idx: int) -> Tensor:
        return msg.matrix


IDENTITY_HOOKS = RegularizerHooks()


@dataclass
class Model:
    layers: list
    head_weight: Tensor
    head_bias: Tensor
    task: str = "node_classification"
    activation: str = "relu"

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def out_dim(self) -> int:
        return self.head_weight.cols

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + [self.head_weight, self.head_bias]

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p.data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def build_model(
    kind: str,
    d_in: int,
    hidden_dim: int,
    out_dim: int,
    relation_count: int,
    layers: int = 1,
    seed: int = 0,
    task: str = "node_classification",
    activation: str = "relu",
) -> Model:
    if kind not in ("rgcn", "rgat"):
        raise ValueError(f"unknown backbone {kind!r}")
    if layers < 1:
        raise ValueError("a model needs at least one message-passing layer")
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    cls = RgcnLayer if kind == "rgcn" else RgatLayer
    stack = []
    d = d_in
    for _ in range(layers):
        stack.append(cls.init(d, hidden_dim, relation_count, rng))
        d = hidden_dim
    head_w = glorot(rng, hidden_dim, out_dim)
    head_b = T.parameter(np.zeros((1, out_dim)))
    return Model(stack, head_w, head_b, task=task, activation=activation)


# ---------------------------------------------------------------------------


def _transformed(H: Tensor, layer: Layer) -> Tensor:
    # Rows r*p .. r*p+p-1 hold H @ W_r.
    return T.concat_rows([H @ w for w in layer.weights])


def build_messages(H: Tensor, g: HeteroGraph, layer: Layer, record: dict | None = None) -> MessageMatrix:
    if H.rows != g.p:
        raise ShapeError(f"node state has {H.rows} rows for a graph with {g.p} nodes")
    if H.cols != layer.d_in:
        raise DimensionError(f"node state width {H.cols} does not match layer input {layer.d_in}")
    p, R = g.p, len(layer.weights)
    if g.k and g.rel.max() >= R:
        raise GraphIndexError(f"graph uses relation {g.rel.max()} but the layer has {R} relation weights")
    Z = _transformed(H, layer)
    z_src = T.gather_rows(Z, g.rel * p + g.src)
    group = g.dst * R + g.rel
    if isinstance(layer, RgcnLayer):
        counts = np.bincount(group, minlength=p * R).astype(np.float64)
        coeff = (1.0 / counts[group])[:, None] if g.k else np.zeros((0, 1))
        return MessageMatrix(T.scale_rows(z_src, T.constant(coeff)), g.src, g.dst, g.rel)
    z_dst = T.gather_rows(Z, g.rel * p + g.dst)
    a_src = T.gather_rows(layer.att_src, g.rel)
    a_dst = T.gather_rows(layer.att_dst, g.rel)
    score = T.row_sum(z_src * a_src + z_dst * a_dst)
    if record is not None:
        record.setdefault("preact", []).append(score.data)
    alpha = T.segment_softmax(T.leaky_relu(score, layer.slope), group, p * R)
    return MessageMatrix(T.scale_rows(z_src, alpha), g.src, g.dst, g.rel, attention=alpha)


def _combine(H: Tensor, M: Tensor, g: HeteroGraph, layer: Layer, activate: bool, record: dict | None) -> Tensor:
    out = T.scatter_aggregate(M, g.dst, g.p, "sum") + H @ layer.self_weight
    if not activate:
        return out
    if record is not None:
        record.setdefault("preact", []).append(out.data)
    return T.relu(out)


def layer_forward(
    H: Tensor,
    g: HeteroGraph,
    layer: Layer,
    M_override: MessageMatrix | None = None,
    activate: bool = True,
) -> Tensor:
    if M_override is None:
        M = build_messages(H, g, layer).matrix
    else:
        same_edges = (
            M_override.src.size == g.k
            and np.array_equal(M_override.src, g.src)
            and np.array_equal(M_override.dst, g.dst)
            and np.array_equal(M_override.rel, g.rel)
        )
        if not same_edges:
            raise ShapeError("message override was built for a different edge list")
        if M_override.matrix.shape != (g.k, layer.d_out):
            raise ShapeError(f"message override is {M_override.matrix.shape}, expected ({g.k}, {layer.d_out})")
        M = M_override.matrix
    return _combine(H, M, g, layer, activate, None)


def model_forward(
    F: Tensor,
    g: HeteroGraph,
    model: Model,
    hooks: RegularizerHooks = IDENTITY_HOOKS,
    record: dict | None = None,
) -> Tensor:
    """Logits (node task) or embeddings (link task) for every node.

    ``hooks.on_features`` sees the input features once; ``hooks.on_messages``
    sees every layer's message matrix before aggregation. When ``record`` is a
    dict, pre-activation arrays are appended to ``record['preact']`` and the
    effective message matrices to ``record['messages']``.
    """
    if F.cols != model.layers[0].d_in:
        raise DimensionError(f"features have width {F.cols}, model expects {model.layers[0].d_in}")
    H = hooks.on_features(F)
    activate = model.activation == "relu"
    for idx, layer in enumerate(model.layers):
        msg = build_messages(H, g, layer, record)
        M = hooks.on_messages(msg, idx)
        if M.shape != msg.matrix.shape:
            raise ShapeError(f"message hook returned {M.shape}, expected {msg.matrix.shape}")
        if record is not None:
            record.setdefault("messages", []).append(M.data)
        H = _combine(H, M, g, layer, activate, record)
    return H @ model.head_weight + model.head_bias


def pair_logits(emb: Tensor, pairs) -> Tensor:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return T.row_sum(T.gather_rows(emb, pairs[:, 0]) * T.gather_rows(emb, pairs[:, 1]))


def link_score(emb, pairs) -> np.ndarray:
    """``sigmoid(emb_u . emb_v)`` for every ``(u, v)`` pair."""
    e = emb.data if isinstance(emb, Tensor) else np.asarray(emb, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= e.shape[0]):
        raise GraphIndexError(f"pair index outside [0, {e.shape[0]})")
    logits = np.einsum("ij,ij->i", e[pairs[:, 0]], e[pairs[:, 1]])
    return T._sigmoid(logits)
