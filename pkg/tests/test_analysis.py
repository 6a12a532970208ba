import csv

import numpy as np
import pytest

from grugraph import tensor as T
from grugraph.analysis import (
    SWEEP_COLUMNS,
    SweepSpec,
    ablation_grid,
    convergence_epochs,
    count_effective_messages,
    diversity_count,
    mean_std_label,
    oversmoothing_sweep,
    pooled_std,
    robustness_sweep,
    run_sweep,
    variance_probe,
    write_sweep_csv,
)
from grugraph.backbone import build_model
from grugraph.errors import ConfigError, ProbeError
from grugraph.hetgraph import NODE_SPLIT, synth_graph
from grugraph.regularizers import GradRegConfig, GrugHooks, PerturbationState, grug_epoch, make_hooks
from grugraph.training import NodeTask, TrainConfig, fit, make_loss_fn

BASE = TrainConfig(epochs=8, hidden_dim=8, regularizer=GradRegConfig(alpha=0.1, beta=0.01))


@pytest.fixture(scope="module")
def small():
    return synth_graph([40, 30], 2, 6, 3, 0.8, 0, edges_per_relation=60)


def test_convergence_epochs_examples():
    assert convergence_epochs([1.0, 0.5, 0.2], 0.5) == 2
    assert convergence_epochs([1.0, 0.5, 0.2], 0.1) is None


def test_variance_probe_zero_radii(toy_graph):
    task = NodeTask.from_graph(toy_graph, NODE_SPLIT)
    model = build_model("rgcn", 8, 8, 3, toy_graph.relation_count, layers=1, seed=0)
    state = PerturbationState(alpha=0.0, beta=0.0, N=3, record_increments=True)
    hooks = GrugHooks(state)
    for _ in range(50):
        grug_epoch(model, toy_graph, T.constant(toy_graph.features), make_loss_fn(task), hooks)
    assert variance_probe(state.increments) == (0.0, 0.0, 0.0)


def test_variance_probe_needs_100_increments():
    with pytest.raises(ProbeError):
        variance_probe([(np.zeros(2), np.zeros(2))] * 99)


@pytest.fixture(scope="module")
def frozen(toy_graph):
    task = NodeTask.from_graph(toy_graph, NODE_SPLIT)
    model = build_model("rgcn", 8, 8, 3, toy_graph.relation_count, layers=1, seed=0)
    return model, toy_graph, T.constant(toy_graph.features), make_loss_fn(task)


def test_clean_frozen_gives_one_matrix(frozen):
    model, g, F, loss = frozen
    assert count_effective_messages(model, g, F, loss, make_hooks(GradRegConfig()), 20) == (1, 0)


def test_dropmessage_keep_one_gives_one_matrix(frozen):
    model, g, F, loss = frozen
    n, masks = count_effective_messages(model, g, F, loss, make_hooks(GradRegConfig(method="dropmessage")), 20)
    assert n == 1 and masks == 1


def test_grug_gives_distinct_matrices(frozen):
    model, g, F, loss = frozen
    before = [p.data.copy() for p in model.parameters()]
    res = diversity_count(
        model,
        g,
        F,
        loss,
        50,
        GradRegConfig(method="grug", alpha=0.1, beta=0.01),
        GradRegConfig(method="dropmessage", drop_rate=0.3),
    )
    assert res.distinct_grug == 50
    assert res.distinct_drop <= res.drop_masks
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_diversity_guard(frozen):
    model, g, F, loss = frozen
    with pytest.raises(ProbeError):
        count_effective_messages(model, g, F, loss, make_hooks(GradRegConfig()), 201)


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec("width", (1,), 1, BASE)
    with pytest.raises(ConfigError):
        SweepSpec("depth", (), 1, BASE)
    with pytest.raises(ConfigError):
        SweepSpec("depth", (1,), 0, BASE)


def test_sweep_pairs_seeds_across_methods():
    spec = SweepSpec("depth", (1, 2), 3, BASE, ("clean", "grug"))
    for r in range(3):
        seeds = {spec.config_for(v, m, r).seed for v in (1, 2) for m in ("clean", "grug")}
        assert seeds == {BASE.seed + r}
    assert spec.config_for(2, "grug", 0).layers == 2
    assert spec.config_for(1, "grug", 0).regularizer.method == "grug"


def test_ratio_zero_reproduces_baseline(small):
    res = robustness_sweep(small, ("clean", "grug"), BASE, ratios=(0.0,), repeats=2)
    for c in res.cells:
        direct = fit(small, SweepSpec("attack_ratio", (0.0,), 2, BASE).config_for(0.0, c.method, c.repeat))
        assert c.metric == direct.test.primary
        assert c.train_losses == [r.train_loss for r in direct.trace]


def test_one_repeat_reports_zero_std(small):
    res = oversmoothing_sweep(small, ("clean",), BASE, depths=(1, 2), repeats=1)
    assert [r.std for r in res.rows] == [0.0, 0.0]
    assert [r.value for r in res.rows] == [1, 2]


def test_std_uses_n_minus_one(small):
    res = oversmoothing_sweep(small, ("clean",), BASE, depths=(1,), repeats=3)
    assert res.rows[0].std == pytest.approx(np.std(res.metrics(1, "clean"), ddof=1), abs=1e-15)


def test_sweep_is_deterministic_and_parallel_safe(small):
    spec = SweepSpec("alpha", (0.0, 0.2), 2, BASE, ("grug",))
    a = run_sweep(spec, small)
    b = run_sweep(spec, small, jobs=3)
    assert [c.metric for c in a.cells] == [c.metric for c in b.cells]
    assert [c.train_losses for c in a.cells] == [c.train_losses for c in b.cells]


def test_ablation_grid_rows_and_gap(small):
    res = ablation_grid(
        small, BASE, repeats=2, method_params={"grug_e": {"edge_eps": 0.1}, "grug_T": {"edge_eps": 0.1}}
    )
    assert [r.method for r in res.rows] == ["grug_n", "grug_e", "grug_m", "grug_T", "grug"]
    assert res.gap == pytest.approx(res.row("grug_T", "grug_T").mean - res.row("grug", "grug").mean)


def test_sweep_csv_columns(small, tmp_path):
    res = oversmoothing_sweep(small, ("clean", "grug"), BASE, depths=(1,), repeats=2)
    path = tmp_path / "sweep.csv"
    write_sweep_csv(res, path)
    rows = list(csv.reader(path.read_text().splitlines()))
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert len(rows) == 5
    assert float(rows[1][4]) == res.cells[0].metric


def test_reporting_helpers():
    assert mean_std_label([0.9, 0.91]) == "90.50±0.71"
    assert pooled_std([[1.0, 3.0], [2.0, 4.0]]) == pytest.approx(np.sqrt(2))
    assert pooled_std([[1.0]]) == 0.0
