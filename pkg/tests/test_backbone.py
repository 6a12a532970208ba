import numpy as np
import pytest
from conftest import central_difference, rel_error, tiny_graph
from hypothesis import given
from hypothesis import strategies as st

from grugraph import tensor as T
from grugraph.backbone import (
    IDENTITY_HOOKS,
    MessageMatrix,
    RegularizerHooks,
    RgatLayer,
    RgcnLayer,
    build_messages,
    build_model,
    layer_forward,
    link_score,
    model_forward,
)
from grugraph.errors import GraphIndexError, ShapeError
from grugraph.hetgraph import HeteroGraph, synth_graph
from grugraph.training import NodeTask, TrainConfig, f1_scores, features_tensor, make_loss_fn, train


def identity_rgcn(d, R=1):
    return RgcnLayer([T.parameter(np.eye(d)) for _ in range(R)], T.parameter(np.eye(d)))


def test_single_edge_identity_message_is_source_row():
    g = tiny_graph([(0, 1)], 2)
    H = T.constant([[1.0, 2.0], [3.0, 4.0]])
    msg = build_messages(H, g, identity_rgcn(2))
    assert np.array_equal(msg.matrix.data, [[1.0, 2.0]])
    assert msg.src.tolist() == [0] and msg.dst.tolist() == [1]


def test_rgcn_mean_normalization_per_relation():
    g = tiny_graph([(0, 2, 0), (1, 2, 0), (0, 2, 1)], 3, relation_count=2)
    H = T.constant(np.arange(6.0).reshape(3, 2))
    msg = build_messages(H, g, identity_rgcn(2, R=2))
    assert np.allclose(msg.matrix.data, [H.data[0] / 2, H.data[1] / 2, H.data[0]])


def test_rgat_singleton_groups_have_unit_attention():
    g = tiny_graph([(0, 1), (1, 2), (2, 0)], 3)
    layer = RgatLayer.init(2, 3, 1, np.random.default_rng(0))
    msg = build_messages(T.constant(np.random.default_rng(1).standard_normal((3, 2))), g, layer)
    assert np.allclose(msg.attention.data, 1.0, atol=0)


@given(st.integers(0, 1000))
def test_rgat_attention_sums_to_one_per_target_relation(seed):
    g = synth_graph([8, 6], 3, 3, 2, 0.5, seed, edges_per_relation=12)
    layer = RgatLayer.init(3, 4, g.relation_count, np.random.default_rng(seed))
    msg = build_messages(T.constant(g.features), g, layer)
    group = g.dst * g.relation_count + g.rel
    sums = np.bincount(group, weights=msg.attention.data[:, 0])
    assert np.allclose(sums[np.bincount(group) > 0], 1.0, atol=1e-9)


def test_empty_graph_gives_empty_messages():
    g = tiny_graph([], 3)
    msg = build_messages(T.constant(np.ones((3, 2))), g, identity_rgcn(2))
    assert msg.matrix.shape == (0, 2)


def test_no_edges_identity_self_weight_without_relu_returns_input():
    g = tiny_graph([], 2)
    H = T.constant([[-1.0, 2.0], [3.0, -4.0]])
    assert np.array_equal(layer_forward(H, g, identity_rgcn(2), activate=False).data, H.data)


def test_zero_override_equals_relu_of_self_transform():
    g = tiny_graph([(0, 1), (1, 0)], 2)
    layer = RgcnLayer.init(2, 3, 1, np.random.default_rng(0))
    H = T.constant(np.random.default_rng(1).standard_normal((2, 2)))
    zeros = MessageMatrix(T.constant(np.zeros((2, 3))), g.src, g.dst, g.rel)
    out = layer_forward(H, g, layer, zeros)
    assert np.array_equal(out.data, np.maximum(H.data @ layer.self_weight.data, 0))


def test_override_shape_and_edge_checks():
    g = tiny_graph([(0, 1), (1, 0)], 2)
    layer = identity_rgcn(2)
    H = T.constant(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        layer_forward(H, g, layer, MessageMatrix(T.constant(np.zeros((2, 3))), g.src, g.dst, g.rel))
    with pytest.raises(ShapeError):
        layer_forward(H, g, layer, MessageMatrix(T.constant(np.zeros((2, 2))), g.dst, g.src, g.rel))


def test_override_gradient_matches_finite_differences():
    g = synth_graph([6, 4], 2, 3, 2, 0.5, 0, edges_per_relation=8)
    layer = RgcnLayer.init(3, 2, g.relation_count, np.random.default_rng(0))
    H = T.constant(g.features)
    m0 = build_messages(H, g, layer).matrix.data.copy()
    w = np.random.default_rng(2).standard_normal((g.p, 2))

    def loss(m):
        return T.sum_all(layer_forward(H, g, layer, MessageMatrix(m, g.src, g.dst, g.rel)) * T.constant(w))

    leaf = T.parameter(m0)
    T.backward(loss(leaf))
    num = central_difference(lambda: loss(T.constant(m0)).item(), m0)
    assert rel_error(leaf.grad, num, floor=1e-6) < 1e-4


class ZeroMessages(RegularizerHooks):
    def on_messages(self, msg, layer_idx):
        return T.constant(np.zeros(msg.matrix.shape))


def test_zero_message_hook_matches_zero_override_path():
    g = synth_graph([6, 4], 2, 3, 2, 0.5, 0, edges_per_relation=8)
    model = build_model("rgcn", 3, 4, 2, g.relation_count, layers=1, seed=0)
    F = T.constant(g.features)
    out = model_forward(F, g, model, ZeroMessages())
    layer = model.layers[0]
    zero = MessageMatrix(T.constant(np.zeros((g.k, 4))), g.src, g.dst, g.rel)
    H = layer_forward(F, g, layer, zero)
    assert np.array_equal(out.data, (H @ model.head_weight + model.head_bias).data)


@pytest.mark.parametrize("kind", ["rgcn", "rgat"])
def test_forward_is_bit_identical_and_identity_hooks_are_plain(kind, toy_graph):
    model = build_model(kind, 8, 6, 3, toy_graph.relation_count, layers=2, seed=1)
    F = T.constant(toy_graph.features)
    a = model_forward(F, toy_graph, model)
    b = model_forward(F, toy_graph, model, RegularizerHooks())
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("kind", ["rgcn", "rgat"])
def test_node_permutation_equivariance(kind):
    g = synth_graph([10, 8], 2, 4, 3, 0.6, 5, edges_per_relation=20, labeled_types=(0, 1))
    perm = np.random.default_rng(0).permutation(g.p)
    inv = np.argsort(perm)  # new id of old node i is inv[i]
    gp = HeteroGraph(
        node_type=g.node_type[perm],
        src=inv[g.src],
        dst=inv[g.dst],
        rel=g.rel,
        relation_count=g.relation_count,
        feature_dim=g.feature_dim,
        features=g.features[perm],
        labels=g.labels[perm],
        num_classes=g.num_classes,
    )
    model = build_model(kind, 4, 5, 3, g.relation_count, layers=2, seed=2)
    out = model_forward(T.constant(g.features), g, model)
    outp = model_forward(T.constant(gp.features), gp, model)
    assert np.max(np.abs(outp.data - out.data[perm])) < 1e-9
    la = T.softmax_cross_entropy(out, g.labels).item()
    lb = T.softmax_cross_entropy(outp, gp.labels).item()
    assert abs(la - lb) < 1e-9


def test_zeroing_source_row_zeroes_its_outgoing_messages_gradient_path():
    g = tiny_graph([(0, 1), (0, 2), (1, 2)], 3, d=2)
    layer = RgcnLayer.init(2, 2, 1, np.random.default_rng(0))
    F = np.random.default_rng(1).standard_normal((3, 2))
    F[0] = 0.0
    msg = build_messages(T.constant(F), g, layer)
    assert not msg.matrix.data[:2].any()


def test_relation_index_beyond_layer_weights():
    g = tiny_graph([(0, 1, 1)], 2, relation_count=2)
    with pytest.raises(GraphIndexError):
        build_messages(T.constant(np.ones((2, 2))), g, identity_rgcn(2, R=1))


def test_link_score_examples():
    emb = T.constant([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
    s = link_score(emb, [(0, 1), (2, 3), (3, 2)])
    assert s[0] == 0.5
    assert s[1] == pytest.approx(1 / (1 + np.exp(-4.0)), abs=1e-12)
    assert s[1] == s[2]
    with pytest.raises(GraphIndexError):
        link_score(emb, [(0, 4)])


def test_one_layer_model_fits_toy_graph():
    g = synth_graph([30, 20], 2, 8, 3, 0.9, 0, edges_per_relation=60, class_sep=2.0)
    from grugraph.hetgraph import SplitSpec

    task = NodeTask.from_graph(g, SplitSpec(0.6, 0.2, 0.2, 0))
    F = features_tensor(g)
    model = build_model("rgcn", 8, 16, 3, g.relation_count, layers=1, seed=0)
    cfg = TrainConfig(epochs=200, lr=0.01, hidden_dim=16)
    train(model, g, cfg, task, F)
    out = model_forward(F, g, model, IDENTITY_HOOKS)
    micro, _ = f1_scores(out.data[task.train_idx].argmax(1), task.labels[task.train_idx], 3)
    assert micro == 1.0
    assert make_loss_fn(task)(out).item() < 0.1
