"""Acceptance criteria 1 to 12, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -v -s`` and in the terminal report) before asserting. Criteria 7 to 10
are paired-seed experiments on a 600-node, 3-type homophilous synthetic graph
with RGCN, five repeats and the tuned radii (alpha, beta) = (0.35, 0.01).
"""

import time

import numpy as np
import pytest

from grugraph import cli
from grugraph.analysis import ablation_grid, oversmoothing_sweep, pooled_std, robustness_sweep
from grugraph.oracle import VERIFICATION_CHECKS
from grugraph.regularizers import GradRegConfig
from grugraph.training import TrainConfig

pytestmark = pytest.mark.acceptance

BASE = TrainConfig(epochs=200, hidden_dim=32, regularizer=GradRegConfig(alpha=0.35, beta=0.01))
REPEATS = 5


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail, elapsed, limit):
        ok = passed and elapsed < limit
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s, limit {limit:.0f}s]")
        assert passed, detail
        assert elapsed < limit, f"criterion {number} took {elapsed:.1f}s (limit {limit}s)"

    return emit


def _oracle_group(number, group, limit, report):
    t0 = time.perf_counter()
    records = VERIFICATION_CHECKS[group]()
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in records if not r.passed]
    detail = "; ".join(f"{r.name}={r.observed:.3g}" for r in records)
    report(number, not failed, detail if not failed else f"failed: {failed}; {detail}", elapsed, limit)


def test_c01_gradient_correctness(report):
    _oracle_group(1, "gradients", 30, report)


def test_c02_degenerate_identities(report):
    _oracle_group(2, "identities", 60, report)


def test_c03_variance_bounds(report):
    _oracle_group(3, "variance", 120, report)


def test_c04_taylor_identities(report):
    _oracle_group(4, "taylor", 60, report)


def test_c05_drop_expectation(report):
    _oracle_group(5, "drop", 120, report)


def test_c06_diversity(report):
    _oracle_group(6, "diversity", 60, report)


def test_c07_grug_not_below_clean(bench_graph, report):
    t0 = time.perf_counter()
    res = oversmoothing_sweep(bench_graph, ("clean", "grug"), BASE, depths=(1,), repeats=REPEATS)
    elapsed = time.perf_counter() - t0
    clean, grug = res.metrics(1, "clean"), res.metrics(1, "grug")
    diffs = grug - clean
    passed = grug.mean() >= clean.mean() and bool(np.all(diffs >= -0.005))
    per_seed = np.round(100 * diffs, 2).tolist()
    detail = f"clean={100 * clean.mean():.2f} grug={100 * grug.mean():.2f} per-seed diff (points)={per_seed}"
    report(7, passed, detail, elapsed, 300)


def test_c08_oversmoothing(bench_graph, report):
    t0 = time.perf_counter()
    res = oversmoothing_sweep(bench_graph, ("clean", "grug"), BASE, depths=range(1, 7), repeats=REPEATS)
    elapsed = time.perf_counter() - t0
    d_clean, d_grug = res.degradation("clean", 1, 6), res.degradation("grug", 1, 6)
    curve = {m: [round(100 * res.row(d, m).mean, 1) for d in range(1, 7)] for m in ("clean", "grug")}
    detail = f"clean@1-clean@6={100 * d_clean:.2f} grug@1-grug@6={100 * d_grug:.2f} points; depth 1-6 means {curve}"
    report(8, d_clean > d_grug, detail, elapsed, 600)


def test_c09_robustness(bench_graph, report):
    t0 = time.perf_counter()
    res = robustness_sweep(bench_graph, ("clean", "grug"), BASE, ratios=(0.0, 0.2, 0.4), repeats=REPEATS)
    elapsed = time.perf_counter() - t0
    d_clean, d_grug = res.degradation("clean", 0.0, 0.4), res.degradation("grug", 0.0, 0.4)
    detail = f"degradation 0->0.4: clean={100 * d_clean:.2f} grug={100 * d_grug:.2f} points"
    report(9, d_clean > d_grug, detail, elapsed, 600)


def test_c10_ablation(bench_graph, report):
    t0 = time.perf_counter()
    params = {"grug_e": {"edge_eps": 0.1}, "grug_T": {"edge_eps": 0.1}}
    res = ablation_grid(bench_graph, BASE, repeats=REPEATS, method_params=params)
    elapsed = time.perf_counter() - t0
    mean = {m: res.method_metrics(m).mean() for m in ("grug_n", "grug_e", "grug_m", "grug_T", "grug")}
    spread = pooled_std([res.method_metrics("grug_T"), res.method_metrics("grug")])
    gap_ok = abs(res.gap) <= max(0.005, spread)
    edge_ok = not (mean["grug_e"] > mean["grug_n"] and mean["grug_e"] > mean["grug_m"])
    detail = f"|gap|={100 * abs(res.gap):.2f} vs max(0.5, pooled std {100 * spread:.2f}) points; " + " ".join(
        f"{m}={100 * v:.2f}" for m, v in mean.items()
    )
    report(10, gap_ok and edge_ok, detail, elapsed, 600)


def test_c11_determinism(tmp_path, report):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 40\nregularizer.method = grug\nregularizer.alpha = 0.35\nregularizer.beta = 0.01\n")
    t0 = time.perf_counter()
    codes = [cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    elapsed = time.perf_counter() - t0
    same = (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    report(11, codes == [0, 0] and same, f"exit codes {codes}, byte-identical trace.csv: {same}", elapsed, 60)


def test_c12_verify_command(tmp_path, report, monkeypatch):
    t0 = time.perf_counter()
    code = cli.main(["verify", "--out", str(tmp_path / "v")])
    elapsed = time.perf_counter() - t0
    # A single failing record must turn the exit code nonzero.
    from grugraph.oracle import CheckRecord

    monkeypatch.setattr(cli, "run_verification", lambda: [CheckRecord("forced", "t", 1.0, False)])
    failing = cli.main(["verify", "--out", str(tmp_path / "f")])
    report(12, code == 0 and failing == 1, f"verify exit={code}, exit with a failing check={failing}", elapsed, 600)
