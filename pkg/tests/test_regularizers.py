import numpy as np
import pytest
from scipy import stats

from grugraph import tensor as T
from grugraph.analysis import variance_probe
from grugraph.backbone import MessageMatrix, build_model, model_forward
from grugraph.errors import ConfigError, ShapeError, StateError
from grugraph.hetgraph import NODE_SPLIT
from grugraph.regularizers import (
    METHODS,
    CleanHooks,
    DropHooks,
    DropMask,
    GradRegConfig,
    GrugHooks,
    PerturbationState,
    apply_drop,
    ascend,
    grug_epoch,
    init_perturbation,
    make_hooks,
    plain_epoch,
)
from grugraph.training import NodeTask, evaluate, make_loss_fn


@pytest.fixture(scope="module")
def setup(toy_graph):
    task = NodeTask.from_graph(toy_graph, NODE_SPLIT)
    return toy_graph, task, T.constant(toy_graph.features), make_loss_fn(task)


def fresh_model(g, seed=0, layers=2):
    return build_model("rgcn", g.feature_dim, 8, g.num_classes, g.relation_count, layers=layers, seed=seed)


# init_perturbation


def test_init_zero_radius_is_zero():
    assert not init_perturbation((3, 4), 0.0, 0).data.any()


def test_init_bounds_mean_and_variance():
    x = init_perturbation((100, 100), 0.35, 0).data
    assert np.abs(x).max() <= 0.35
    assert abs(x.mean()) < 0.01
    assert abs(x.var() / (0.35**2 / 3) - 1) < 0.10


def test_init_negative_radius_rejected():
    with pytest.raises(ConfigError):
        init_perturbation((2, 2), -0.1, 0)


# ascend


def test_ascend_examples():
    zero = T.constant(np.zeros((1, 2)))
    assert np.allclose(ascend(zero, np.array([[3.0, 4.0]]), 1.0).data, [[0.6, 0.8]], atol=1e-15)
    p = T.constant(np.ones((2, 2)))
    assert np.array_equal(ascend(p, np.zeros((2, 2)), 1.0).data, p.data)


def test_two_collinear_ascents_move_exactly_two_steps():
    g = np.random.default_rng(0).standard_normal((4, 3))
    p0 = T.constant(np.zeros((4, 3)))
    p2 = ascend(ascend(p0, g, 0.2), g, 0.2)
    assert abs(np.linalg.norm(p2.data) - 0.4) < 1e-12


def test_ascend_linf_moves_every_entry_by_step():
    p = ascend(T.constant(np.zeros((1, 3))), np.array([[2.0, -0.1, 0.0]]), 0.5, norm="linf")
    assert np.array_equal(p.data, [[0.5, -0.5, 0.0]])


def test_ascend_shape_mismatch():
    with pytest.raises(ShapeError):
        ascend(T.constant(np.zeros((2, 2))), np.zeros((2, 3)), 1.0)


# config


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(method="nope"),
        dict(drop_rate=1.0),
        dict(drop_rate=-0.1),
        dict(alpha=-1),
        dict(beta=-1),
        dict(N=0),
        dict(norm="l3"),
    ],
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        GradRegConfig(**kwargs)


def test_make_hooks_covers_every_method():
    for m in METHODS:
        make_hooks(GradRegConfig(method=m, drop_rate=0.2, alpha=0.1, beta=0.1))


# perturbation state invariants


def test_perturbation_stays_within_growing_box(setup):
    g, _, F, loss_fn = setup
    model = fresh_model(g)
    state = PerturbationState(alpha=0.05, beta=0.02, N=6, sides=(True, True, False), seed=3)
    hooks = GrugHooks(state)
    hooks.begin_epoch(model, g, F)
    assert np.abs(state.delta.data).max() <= 0.02
    assert all(np.abs(gm.data).max() <= 0.05 for gm in state.gammas)
    for t in range(1, 6):
        state.zero_grad()
        T.backward(loss_fn(model_forward(F, g, model, hooks)))
        state.step()
        assert np.abs(state.delta.data).max() <= (t + 1) * 0.02 + 1e-15
        assert all(np.abs(gm.data).max() <= (t + 1) * 0.05 + 1e-15 for gm in state.gammas)


def test_inner_losses_rise_under_small_feature_ascent(setup):
    g, _, F, loss_fn = setup
    violations = 0
    for seed in range(20):
        model = fresh_model(g, seed=seed)
        hooks = make_hooks(GradRegConfig(method="flag", beta=1e-3, N=3), seed=seed)
        res = grug_epoch(model, g, F, loss_fn, hooks)
        violations += sum(b < a for a, b in zip(res.inner_losses, res.inner_losses[1:]))
    assert violations <= 1


def test_increment_variance_bounds(setup):
    g, _, F, loss_fn = setup
    alpha, beta = 0.2, 0.05
    model = fresh_model(g)
    state = PerturbationState(alpha=alpha, beta=beta, N=3, seed=0, record_increments=True)
    hooks = GrugHooks(state)
    for _ in range(50):
        grug_epoch(model, g, F, loss_fn, hooks)
    v_delta, v_gamma, v_total = variance_probe(state.increments)
    n_entries = sum(b.size for _, b in state.increments)
    assert n_entries >= 10_000
    assert v_delta <= beta**2
    assert v_gamma <= alpha**2
    assert v_total <= alpha**2 + beta**2


def test_shape_drift_raises_state_error(setup):
    g, _, F, _ = setup
    model = fresh_model(g, layers=1)
    hooks = make_hooks(GradRegConfig(method="grug", alpha=0.1, beta=0.1))
    hooks.begin_epoch(model, g, F)
    with pytest.raises(StateError):
        hooks.on_features(T.constant(np.zeros((F.shape[0] + 1, F.shape[1]))))
    short = MessageMatrix(T.constant(np.zeros((g.k - 1, 8))), g.src[:-1], g.dst[:-1], g.rel[:-1])
    with pytest.raises(StateError):
        hooks.on_messages(short, 0)


# degenerate identities


def _run(g, F, loss_fn, config, epochs=5, seed=0):
    from grugraph.training import Adam

    model = fresh_model(g, seed=seed)
    hooks = make_hooks(config, seed=seed)
    opt = Adam(lr=0.01)
    epoch = grug_epoch if isinstance(hooks, GrugHooks) else plain_epoch
    losses = [epoch(model, g, F, loss_fn, hooks, opt).loss for _ in range(epochs)]
    return np.array(losses), model


def test_grug_with_zero_radii_and_one_pass_is_clean(setup):
    g, _, F, loss_fn = setup
    a, ma = _run(g, F, loss_fn, GradRegConfig(method="grug", N=1))
    b, mb = _run(g, F, loss_fn, GradRegConfig())
    assert np.max(np.abs(a - b)) < 1e-12
    assert all(np.array_equal(p.data, q.data) for p, q in zip(ma.parameters(), mb.parameters()))


@pytest.mark.parametrize(
    "left,right",
    [
        (dict(method="grug", alpha=0.1, beta=0.0), dict(method="grug_m", alpha=0.1)),
        (dict(method="grug", alpha=0.0, beta=0.05), dict(method="flag", beta=0.05)),
        (dict(method="grug_n", beta=0.05), dict(method="flag", beta=0.05)),
    ],
)
def test_ablation_degeneracies(setup, left, right):
    g, _, F, loss_fn = setup
    a, _ = _run(g, F, loss_fn, GradRegConfig(**left))
    b, _ = _run(g, F, loss_fn, GradRegConfig(**right))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("method", ["dropout", "dropnode", "dropedge", "dropmessage"])
def test_drop_with_keep_one_is_clean(setup, method):
    g, _, F, loss_fn = setup
    a, _ = _run(g, F, loss_fn, GradRegConfig(method=method, drop_rate=0.0))
    b, _ = _run(g, F, loss_fn, GradRegConfig())
    assert np.array_equal(a, b)


def test_clean_hooks_are_identity(setup):
    g, _, F, _ = setup
    model = fresh_model(g)
    assert model_forward(F, g, model, CleanHooks()).data.tobytes() == model_forward(F, g, model).data.tobytes()


# drop masks


def test_keep_one_mask_is_identity():
    X = T.constant(np.random.default_rng(0).standard_normal((3, 4)))
    mask = DropMask.sample(X.shape, 1.0, "message_element", np.random.default_rng(0))
    assert np.array_equal(apply_drop(X, mask).data, X.data)


def test_zero_keep_probability_rejected():
    with pytest.raises(ConfigError):
        DropMask.sample((2, 2), 0.0, "feature_element", np.random.default_rng(0))
    with pytest.raises(ConfigError):
        DropHooks("dropout", 0.0)


@pytest.mark.parametrize("granularity", ["feature_element", "feature_row", "message_row", "message_element"])
def test_drop_preserves_expectation(granularity):
    rng = np.random.default_rng(0)
    X = T.constant(np.where(rng.random((4, 5)) < 0.5, -1.0, 1.0))
    total = np.zeros(X.shape)
    for _ in range(10_000):
        mask = DropMask.sample(X.shape, 0.8, granularity, rng)
        assert set(np.unique(mask.mask)) <= {0.0, 1.0}
        total += apply_drop(X, mask).data
    assert np.max(np.abs(total / 10_000 - X.data)) < 0.02


def test_row_masks_zero_whole_rows():
    mask = DropMask.sample((50, 6), 0.5, "message_row", np.random.default_rng(1)).mask
    assert all(len(set(row)) == 1 for row in mask)


def test_dropedge_row_count_is_binomial(setup):
    g, _, F, _ = setup
    model = fresh_model(g, layers=1)
    hooks = DropHooks("dropedge", 0.5, seed=0)
    k = g.k
    sigma = np.sqrt(k * 0.25)
    counts = []
    for _ in range(1000):
        hooks.begin_epoch(model, g, F)
        msg = MessageMatrix(T.constant(np.ones((k, 8))), g.src, g.dst, g.rel)
        counts.append(int((hooks.on_messages(msg, 0).data[:, 0] == 0).sum()))
    counts = np.array(counts)
    assert abs(counts.mean() - k / 2) < 3 * sigma / np.sqrt(1000)
    assert np.mean(np.abs(counts - k / 2) <= 3 * sigma) > 0.99
    assert stats.binomtest(int(counts.sum()), 1000 * k, 0.5).pvalue > 1e-3


def test_dropedge_shares_mask_across_layers(setup):
    g, _, F, _ = setup
    model = fresh_model(g)
    hooks = DropHooks("dropedge", 0.5, seed=0)
    hooks.begin_epoch(model, g, F)
    ones = MessageMatrix(T.constant(np.ones((g.k, 8))), g.src, g.dst, g.rel)
    assert np.array_equal(hooks.on_messages(ones, 0).data, hooks.on_messages(ones, 1).data)


# evaluation purity


@pytest.mark.parametrize("method", ["dropout", "dropnode", "dropedge", "dropmessage", "flag", "grug", "grug_T"])
def test_hooks_are_identity_in_eval_mode(setup, method):
    g, task, F, _ = setup
    model = fresh_model(g)
    hooks = make_hooks(GradRegConfig(method=method, drop_rate=0.5, alpha=0.3, beta=0.3, edge_eps=0.3))
    hooks.begin_epoch(model, g, F)
    hooks.eval()
    assert model_forward(F, g, model, hooks).data.tobytes() == model_forward(F, g, model).data.tobytes()
    assert evaluate(model, g, F, task).micro_f1 == evaluate(model, g, F, task).micro_f1
