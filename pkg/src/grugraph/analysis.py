"""Experiment harness: depth, attack-ratio, hyperparameter and ablation sweeps, plus
the variance, diversity and convergence probes.

Every sweep pairs its cells: repeat ``r`` trains with seed ``base.seed + r`` for
every method and every axis value, so differences between methods are paired
comparisons on identical splits, initializations and attack edges.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import Model
from .errors import ConfigError, ProbeError
from .hetgraph import EDGE_SPLIT, NODE_SPLIT, HeteroGraph, add_random_edges
from .regularizers import GradRegConfig, make_hooks, run_epoch
from .training import Adam, LinkTask, NodeTask, TrainConfig, fit

AXES = ("depth", "attack_ratio", "method", "alpha", "beta")
ABLATION_METHODS = ("grug_n", "grug_e", "grug_m", "grug_T", "grug")
SWEEP_COLUMNS = ("axis", "value", "method", "repeat", "metric", "epochs_to_threshold")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int
    base: TrainConfig
    methods: tuple = ("clean", "grug")
    method_params: Mapping = field(default_factory=dict)
    loss_threshold: float = 0.5

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {', '.join(AXES)}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.values:
            raise ConfigError("a sweep needs at least one axis value")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "methods", tuple(self.methods))

    def cells(self):
        methods = (None,) if self.axis == "method" else self.methods
        return list(itertools.product(range(len(self.values)), range(len(methods)), range(self.repeats)))

    def config_for(self, value, method: str, repeat: int) -> TrainConfig:
        reg = replace(self.base.regularizer, method=method, **self.method_params.get(method, {}))
        cfg = replace(self.base, seed=self.base.seed + repeat, regularizer=reg)
        if self.axis == "depth":
            cfg = replace(cfg, layers=int(value))
        elif self.axis in ("alpha", "beta"):
            cfg = cfg.with_regularizer(**{self.axis: float(value)})
        return cfg


@dataclass
class Cell:
    axis: str
    value: object
    method: str
    repeat: int
    metric: float
    macro_f1: float | None
    epochs_to_threshold: int | None
    train_losses: list = field(repr=False, default_factory=list)
    valid_losses: list = field(repr=False, default_factory=list)


@dataclass
class SummaryRow:
    value: object
    method: str
    mean: float
    std: float
    mean_epochs: float | None


@dataclass
class SweepResult:
    axis: str
    rows: list
    cells: list

    def row(self, value, method: str) -> SummaryRow:
        for r in self.rows:
            if r.value == value and r.method == method:
                return r
        raise KeyError((value, method))

    def metrics(self, value, method: str) -> np.ndarray:
        """Per-repeat metrics of one cell group, ordered by repeat."""
        return np.array(
            [c.metric for c in sorted(self.cells, key=lambda c: c.repeat) if c.value == value and c.method == method]
        )

    def method_metrics(self, method: str) -> np.ndarray:
        return np.array([c.metric for c in sorted(self.cells, key=lambda c: c.repeat) if c.method == method])

    def degradation(self, method: str, start, end) -> float:
        """Mean paired drop of the metric from axis value ``start`` to ``end``."""
        return float(np.mean(self.metrics(start, method) - self.metrics(end, method)))

    @property
    def gap(self) -> float | None:
        """``grug_T - grug`` mean metric, present for ablation grids."""
        means = {r.method: r.mean for r in self.rows}
        if len(means) != len(self.rows) or not {"grug_T", "grug"} <= means.keys():
            return None
        return means["grug_T"] - means["grug"]


def _std(x: Sequence[float]) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def convergence_epochs(trace, threshold: float) -> int | None:
    """First 1-indexed epoch whose train loss is at most ``threshold``; ``None`` if never."""
    losses = [row.train_loss if hasattr(row, "train_loss") else float(row) for row in trace]
    for i, loss in enumerate(losses, start=1):
        if loss <= threshold:
            return i
    return None


def _task_for(g: HeteroGraph, cfg: TrainConfig):
    if cfg.task == "node_classification":
        return NodeTask.from_graph(g, replace(NODE_SPLIT, seed=cfg.seed))
    return LinkTask.from_graph(g, replace(EDGE_SPLIT, seed=cfg.seed))


def _run_cell(spec: SweepSpec, g: HeteroGraph, vi: int, mi: int, repeat: int) -> Cell:
    value = spec.values[vi]
    method = value if spec.axis == "method" else spec.methods[mi]
    cfg = spec.config_for(value, method, repeat)
    graph = g
    if spec.axis == "attack_ratio":
        graph = add_random_edges(g, float(value), seed=cfg.seed)
    # Splits come from the clean graph so every axis value sees the same labels.
    task = _task_for(g, cfg)
    if isinstance(task, LinkTask) and spec.axis == "attack_ratio":
        task = replace(task, graph=add_random_edges(task.graph, float(value), seed=cfg.seed))
    res = fit(graph, cfg, task)
    return Cell(
        spec.axis,
        value,
        method,
        repeat,
        float(res.test.primary),
        res.test.macro_f1,
        convergence_epochs(res.trace, spec.loss_threshold),
        [r.train_loss for r in res.trace],
        [r.valid_loss for r in res.trace],
    )


def run_sweep(spec: SweepSpec, g: HeteroGraph, jobs: int = 1) -> SweepResult:
    cells = spec.cells()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: _run_cell(spec, g, *c), cells))
    else:
        results = [_run_cell(spec, g, *c) for c in cells]
    order = {m: i for i, m in enumerate(spec.values if spec.axis == "method" else spec.methods)}
    vorder = {v: i for i, v in enumerate(spec.values)}
    results.sort(key=lambda c: (vorder[c.value], order[c.method], c.repeat))
    rows = []
    for (value, method), group in itertools.groupby(results, key=lambda c: (c.value, c.method)):
        group = list(group)
        metrics = [c.metric for c in group]
        epochs = [c.epochs_to_threshold for c in group if c.epochs_to_threshold is not None]
        rows.append(
            SummaryRow(
                value, method, float(np.mean(metrics)), _std(metrics), float(np.mean(epochs)) if epochs else None
            )
        )
    return SweepResult(spec.axis, rows, results)


def oversmoothing_sweep(
    g: HeteroGraph, methods, base: TrainConfig, depths=range(1, 8), repeats: int = 5, method_params=None, jobs: int = 1
) -> SweepResult:
    if min(depths) < 1:
        raise ConfigError("depths must be >= 1")
    spec = SweepSpec("depth", tuple(depths), repeats, base, tuple(methods), method_params or {})
    return run_sweep(spec, g, jobs)


def robustness_sweep(
    g: HeteroGraph,
    methods,
    base: TrainConfig,
    ratios=(0.0, 0.1, 0.2, 0.3, 0.4),
    repeats: int = 5,
    method_params=None,
    jobs: int = 1,
) -> SweepResult:
    if min(ratios) < 0 or max(ratios) > 1:
        raise ConfigError("attack ratios must lie in [0, 1]")
    spec = SweepSpec("attack_ratio", tuple(ratios), repeats, base, tuple(methods), method_params or {})
    return run_sweep(spec, g, jobs)


def ablation_grid(
    g: HeteroGraph, base: TrainConfig, repeats: int = 5, method_params=None, jobs: int = 1
) -> SweepResult:
    spec = SweepSpec("method", ABLATION_METHODS, repeats, base, ABLATION_METHODS, method_params or {})
    return run_sweep(spec, g, jobs)


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in result.cells:
            w.writerow(
                [
                    c.axis,
                    _fmt(c.value),
                    c.method,
                    c.repeat,
                    _fmt(c.metric),
                    "" if c.epochs_to_threshold is None else c.epochs_to_threshold,
                ]
            )


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


# ---------------------------------------------------------------------------
# probes


def variance_probe(increments) -> tuple[float, float, float]:
    """Empirical variances of per-step perturbation increments.

    ``increments`` is the ``PerturbationState.increments`` list of
    ``(delta_increment, gamma_increment)`` pairs; entries are pooled across steps.
    """
    if len(increments) < 100:
        raise ProbeError(f"variance probe needs at least 100 recorded increments, got {len(increments)}")
    d = [np.ravel(a) for a, _ in increments if a is not None]
    gm = [np.ravel(b) for _, b in increments if b is not None]
    d_all = np.concatenate(d) if d else np.zeros(0)
    g_all = np.concatenate(gm) if gm else np.zeros(0)
    both = np.concatenate([d_all, g_all])

    def var(x):
        return float(np.var(x)) if x.size else 0.0

    return var(d_all), var(g_all), var(both)


@dataclass
class DiversityResult:
    distinct_grug: int
    distinct_drop: int
    drop_masks: int
    epochs: int


def _distinct(mats) -> int:
    return len({(np.asarray(m) + 0.0).tobytes() for m in mats})


def count_effective_messages(
    model: Model, g: HeteroGraph, F: T.Tensor, loss_fn, hooks, epochs: int, train: bool = False, lr: float = 0.001
) -> tuple[int, int]:
    """Distinct first-layer effective message matrices (and drop masks) over ``epochs`` epochs.

    With ``train=False`` the parameters stay frozen, so only the regularizer
    changes the matrices between epochs.
    """
    if epochs > 200 or g.k * model.layers[0].d_out > 100_000:
        raise ProbeError("diversity recording is capped at 200 epochs and 1e5 message entries")
    optimizer = Adam(lr=lr) if train else None
    hooks.capture = True
    hooks.captured = []
    if hasattr(hooks, "captured_masks"):
        hooks.captured_masks = []
    snapshot = model.snapshot()
    try:
        for _ in range(epochs):
            run_epoch(model, g, F, loss_fn, hooks, optimizer)
    finally:
        if not train:
            model.load(snapshot)
        hooks.capture = False
    masks = getattr(hooks, "captured_masks", [])
    return _distinct(hooks.captured), _distinct(masks) if masks else 0


def diversity_count(
    model: Model,
    g: HeteroGraph,
    F: T.Tensor,
    loss_fn,
    epochs: int,
    grug: GradRegConfig,
    drop: GradRegConfig,
    seed: int = 0,
    train: bool = False,
) -> DiversityResult:
    """Compare a Grug run and a DropMessage run of equal length from the same start."""
    start = model.snapshot()
    n_grug, _ = count_effective_messages(model, g, F, loss_fn, make_hooks(grug, seed=seed), epochs, train)
    model.load(start)
    n_drop, n_masks = count_effective_messages(model, g, F, loss_fn, make_hooks(drop, seed=seed), epochs, train)
    model.load(start)
    return DiversityResult(n_grug, n_drop, n_masks, epochs)


def mean_std_label(values: Sequence[float], scale: float = 100.0) -> str:
    """``mean±std`` in percentage points, e.g. ``90.36±0.60``."""
    return f"{scale * float(np.mean(values)):.2f}±{scale * _std(values):.2f}"


def pooled_std(groups: Sequence[Sequence[float]]) -> float:
    num = sum((len(g) - 1) * _std(g) ** 2 for g in groups)
    den = sum(len(g) - 1 for g in groups)
    return math.sqrt(num / den) if den > 0 else 0.0
