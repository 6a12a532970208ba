"""Independent numerical checks of gradients, drop expectations and perturbation identities.

Finite differences and Monte-Carlo estimates use forward passes only, so they
never depend on the backward code they are used to validate.
"""

from __future__ import annotations

import json
import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .analysis import count_effective_messages, variance_probe
from .backbone import MessageMatrix, Model, RegularizerHooks, build_model, model_forward
from .errors import ConfigError
from .hetgraph import NODE_SPLIT, HeteroGraph, synth_graph
from .regularizers import DROP_GRANULARITY, DropHooks, GradRegConfig, PerturbationState, make_hooks
from .tensor import Tensor
from .training import NodeTask, TrainConfig, features_tensor, make_loss_fn, train

FD_STEP = 1e-5
# Gradient entries smaller than this are compared in absolute terms: central
# differences carry roughly 1e-16 / FD_STEP of round-off noise.
FD_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# probe hooks


class ProbeHooks(RegularizerHooks):
    """Add fixed perturbations to the features and/or every layer's messages.

    Each forward pass wraps the perturbations in fresh leaf tensors, exposed as
    ``delta_leaf`` and ``gamma_leaves`` so their gradients can be read after a
    backward pass.
    """

    def __init__(self, delta: np.ndarray | None = None, gammas: list | None = None):
        self.delta = delta
        self.gammas = gammas
        self.delta_leaf: Tensor | None = None
        self.gamma_leaves: dict = {}

    def on_features(self, F: Tensor) -> Tensor:
        if self.delta is None:
            return F
        self.delta_leaf = T.parameter(self.delta)
        return F + self.delta_leaf

    def on_messages(self, msg: MessageMatrix, layer_idx: int) -> Tensor:
        if self.gammas is None:
            return msg.matrix
        leaf = T.parameter(self.gammas[layer_idx])
        self.gamma_leaves[layer_idx] = leaf
        return msg.matrix + leaf


def message_shapes(model: Model, g: HeteroGraph) -> list[tuple[int, int]]:
    return [(g.k, layer.d_out) for layer in model.layers]


def _zero_probe(model: Model, g: HeteroGraph, F: Tensor, which: str) -> ProbeHooks:
    delta = np.zeros(F.shape) if which in ("features", "both") else None
    gammas = [np.zeros(s) for s in message_shapes(model, g)] if which in ("messages", "both") else None
    return ProbeHooks(delta, gammas)


def probe_gradients(model: Model, g: HeteroGraph, F: Tensor, loss_fn, which: str):
    """Loss and autodiff gradients w.r.t. the features and/or per-layer messages at zero perturbation."""
    hooks = _zero_probe(model, g, F, which)
    model.zero_grad()
    loss = loss_fn(model_forward(F, g, model, hooks))
    T.backward(loss)
    g_delta = None
    if hooks.delta_leaf is not None:
        g_delta = _grad_or_zero(hooks.delta_leaf)
    g_gammas = None
    if hooks.gammas is not None:
        g_gammas = [_grad_or_zero(hooks.gamma_leaves[i]) for i in range(len(model.layers))]
    model.zero_grad()
    return loss.item(), g_delta, g_gammas


def _grad_or_zero(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros(t.shape)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDiffResult:
    which: str
    samples: int
    max_rel_error: float
    resampled: int


def _rel_error(a: float, n: float, floor: float = FD_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _signs(record: dict) -> list[np.ndarray]:
    return [np.sign(a) for a in record.get("preact", [])]


def finite_diff_check(
    model: Model,
    g: HeteroGraph,
    F: Tensor,
    loss_fn,
    which: str = "params",
    samples: int = 100,
    seed: int = 0,
    step: float = FD_STEP,
    floor: float = FD_FLOOR,
) -> FiniteDiffResult:
    """Largest relative error between autodiff and central differences over random coordinates.

    A coordinate whose ``±step`` nudge flips the sign of any recorded
    pre-activation (a relu or leaky-relu kink) is discarded and redrawn.
    """
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    if which not in ("params", "features", "messages"):
        raise ConfigError(f"which must be params, features or messages, got {which!r}")
    rng = np.random.default_rng(seed)

    if which == "params":
        hooks: RegularizerHooks = ProbeHooks()
        model.zero_grad()
        T.backward(loss_fn(model_forward(F, g, model, hooks)))
        arrays = [p.data for p in model.parameters()]
        grads = [_grad_or_zero(p) for p in model.parameters()]
        model.zero_grad()

        def evaluate(arr_idx, pos, value):
            p = model.parameters()[arr_idx]
            old = p.data
            p.data = old.copy()
            p.data[pos] = value
            rec: dict = {}
            try:
                return loss_fn(model_forward(F, g, model, ProbeHooks(), rec)).item(), rec
            finally:
                p.data = old

    else:
        side = "features" if which == "features" else "messages"
        _, g_delta, g_gammas = probe_gradients(model, g, F, loss_fn, side)
        base = _zero_probe(model, g, F, side)
        if which == "features":
            arrays, grads = [base.delta], [g_delta]
        else:
            arrays, grads = base.gammas, g_gammas

        def evaluate(arr_idx, pos, value):
            bumped = [a.copy() for a in arrays]
            bumped[arr_idx][pos] = value
            hooks = ProbeHooks(bumped[0], None) if which == "features" else ProbeHooks(None, bumped)
            rec: dict = {}
            return loss_fn(model_forward(F, g, model, hooks, rec)).item(), rec

    sizes = np.array([a.size for a in arrays], dtype=np.float64)
    probs = sizes / sizes.sum()
    worst = 0.0
    checked = resampled = 0
    budget = 20 * samples
    while checked < samples:
        if resampled > budget:
            raise ConfigError(f"more than {budget} coordinates sat on activation kinks")
        ai = int(rng.choice(len(arrays), p=probs))
        pos = tuple(int(rng.integers(0, n)) for n in arrays[ai].shape)
        x0 = float(arrays[ai][pos])
        lp, rp = evaluate(ai, pos, x0 + step)
        lm, rm = evaluate(ai, pos, x0 - step)
        if any(np.any(a != b) for a, b in zip(_signs(rp), _signs(rm))):
            resampled += 1
            continue
        numeric = (lp - lm) / (2.0 * step)
        worst = max(worst, _rel_error(float(grads[ai][pos]), numeric, floor))
        checked += 1
    return FiniteDiffResult(which, samples, worst, resampled)


# ---------------------------------------------------------------------------
# Monte-Carlo drop expectation


@dataclass
class McExpectation:
    trials: int
    mean_perturbed_loss: float
    clean_loss: float
    ci_halfwidth: float

    @property
    def gap(self) -> float:
        return self.mean_perturbed_loss - self.clean_loss

    @property
    def holds(self) -> bool:
        """Dropping does not lower the expected loss below clean beyond the noise."""
        return self.mean_perturbed_loss >= self.clean_loss - self.ci_halfwidth


def mc_drop_expectation(
    model: Model,
    g: HeteroGraph,
    F: Tensor,
    loss_fn,
    method: str,
    keep_prob: float,
    trials: int = 1000,
    seed: int = 0,
) -> McExpectation:
    """Mean loss under freshly drawn drop masks versus the unmasked loss."""
    if trials < 1000:
        raise ConfigError(f"Monte-Carlo estimates need at least 1000 trials, got {trials}")
    if method not in DROP_GRANULARITY:
        raise ConfigError(f"{method!r} is not a drop method")
    clean = loss_fn(model_forward(F, g, model)).item()
    hooks = DropHooks(method, keep_prob, seed)
    values = np.empty(trials)
    for i in range(trials):
        hooks.begin_epoch(model, g, F)
        values[i] = loss_fn(model_forward(F, g, model, hooks)).item()
    # Averaging the differences keeps the mean exactly at ``clean`` when no trial moves the loss.
    diffs = values - clean
    half = 1.96 * float(np.std(diffs, ddof=1)) / math.sqrt(trials)
    return McExpectation(trials, clean + float(diffs.mean()), clean, half)


def linear_readout_loss(shape: tuple[int, int], seed: int = 0) -> Callable[[Tensor], Tensor]:
    """A loss that is linear in the model output: ``sum(out * W) / rows`` for a fixed random ``W``."""
    w = T.constant(np.random.default_rng(seed).standard_normal(shape) / shape[0])
    return lambda out: T.sum_all(out * w)


# ---------------------------------------------------------------------------
# Taylor checks


@dataclass
class TaylorEstimate:
    side: str
    radius: float
    norm_kind: str
    predicted_delta_loss: float
    observed_delta_loss: float

    @property
    def rel_error(self) -> float:
        return abs(self.observed_delta_loss - self.predicted_delta_loss) / max(abs(self.observed_delta_loss), 1e-12)


def _maximizer(grad: np.ndarray, radius: float, norm_kind: str, total_l2: float) -> np.ndarray:
    if norm_kind == "l2":
        return radius * grad / total_l2
    return radius * np.sign(grad)


def taylor_perturbation_check(
    model: Model,
    g: HeteroGraph,
    F: Tensor,
    loss_fn,
    side: str = "features",
    radius: float = 1e-4,
    norm_kind: str = "l2",
) -> TaylorEstimate | None:
    """Loss increase under the first-order worst-case perturbation versus its prediction.

    ``l2`` moves along ``radius * grad / ||grad||_2`` and predicts
    ``radius * ||grad||_2``; ``l1`` moves along ``radius * sign(grad)`` and
    predicts ``radius * ||grad||_1``. With ``side='both'`` the features and the
    messages are each perturbed at ``radius`` and the prediction is the sum of
    the two sides. Returns ``None`` when the relevant gradient is zero.
    """
    if side not in ("features", "messages", "both"):
        raise ConfigError(f"side must be features, messages or both, got {side!r}")
    if norm_kind not in ("l1", "l2"):
        raise ConfigError(f"norm_kind must be l1 or l2, got {norm_kind!r}")
    if not 0.0 <= radius <= 1e-2:
        raise ConfigError(f"radius must lie in [0, 1e-2] for a first-order check, got {radius}")
    base, g_delta, g_gammas = probe_gradients(model, g, F, loss_fn, side)
    predicted = 0.0
    delta = gammas = None
    if g_delta is not None:
        l1, l2 = T.global_norms([g_delta])
        if l2 == 0.0:
            return None
        delta = _maximizer(g_delta, radius, norm_kind, l2)
        predicted += radius * (l2 if norm_kind == "l2" else l1)
    if g_gammas is not None:
        l1, l2 = T.global_norms(g_gammas)
        if l2 == 0.0:
            return None
        gammas = [_maximizer(gm, radius, norm_kind, l2) for gm in g_gammas]
        predicted += radius * (l2 if norm_kind == "l2" else l1)
    perturbed = loss_fn(model_forward(F, g, model, ProbeHooks(delta, gammas))).item()
    return TaylorEstimate(side, radius, norm_kind, predicted, perturbed - base)


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class CheckRecord:
    name: str
    tolerance: str
    observed: float
    passed: bool
    detail: str = ""


def toy_graph(seed: int = 0) -> HeteroGraph:
    return synth_graph([40, 30, 20], 3, 8, 3, 0.8, seed, edges_per_relation=60)


def toy_setup(backbone: str = "rgcn", seed: int = 0, layers: int = 1, activation: str = "relu"):
    g = toy_graph(seed)
    task = NodeTask.from_graph(g, replace(NODE_SPLIT, seed=seed))
    F = features_tensor(g)
    model = build_model(backbone, F.cols, 8, g.num_classes, g.relation_count, layers, seed, activation=activation)
    return g, task, F, model


def trained_toy(seed: int = 0, epochs: int = 100):
    g, task, F, model = toy_setup("rgcn", seed)
    cfg = TrainConfig(epochs=epochs, lr=0.01, seed=seed, hidden_dim=8)
    train(model, g, cfg, task, F)
    return g, task, F, model


def loss_trajectory(g: HeteroGraph, task, config: TrainConfig) -> np.ndarray:
    F = features_tensor(g)
    model = build_model(
        config.backbone, F.cols, config.hidden_dim, g.num_classes, g.relation_count, config.layers, config.seed
    )
    _, trace = train(model, g, config, task, F)
    return np.array([r.train_loss for r in trace])


def _check_gradients(seeds=range(5), samples: int = 100) -> list[CheckRecord]:
    worst = 0.0
    parts = []
    for backbone in ("rgcn", "rgat"):
        for which in ("params", "features", "messages"):
            w = 0.0
            for s in seeds:
                g, task, F, model = toy_setup(backbone, s)
                res = finite_diff_check(model, g, F, make_loss_fn(task), which, samples, seed=s)
                w = max(w, res.max_rel_error)
            parts.append(f"{backbone}/{which}={w:.2e}")
            worst = max(worst, w)
    return [CheckRecord("gradient_finite_difference", "max rel error < 1e-4", worst, worst < 1e-4, ", ".join(parts))]


def _check_identities(epochs: int = 20, seed: int = 0) -> list[CheckRecord]:
    g = toy_graph(seed)
    task = NodeTask.from_graph(g, replace(NODE_SPLIT, seed=seed))
    base = TrainConfig(epochs=epochs, lr=0.01, seed=seed, hidden_dim=8, layers=2)

    def run(**reg):
        return loss_trajectory(g, task, replace(base, regularizer=GradRegConfig(**reg)))

    clean = run()
    pairs = [
        ("grug(alpha=beta=0,N=1) == clean", run(method="grug", N=1), clean),
        ("grug(beta=0) == grug_m", run(method="grug", alpha=0.1, N=3), run(method="grug_m", alpha=0.1, N=3)),
        ("grug(alpha=0) == flag", run(method="grug", beta=0.05, N=3), run(method="flag", beta=0.05, N=3)),
        ("flag == grug_n", run(method="flag", beta=0.05, N=3), run(method="grug_n", beta=0.05, N=3)),
    ]
    for method in DROP_GRANULARITY:
        pairs.append((f"{method}(keep=1) == clean", run(method=method, drop_rate=0.0), clean))
    out = []
    for name, a, b in pairs:
        diff = float(np.max(np.abs(a - b)))
        out.append(CheckRecord(f"identity: {name}", "max |diff| < 1e-12", diff, diff < 1e-12))
    return out


def _check_variance(epochs: int = 200, alpha: float = 0.35, beta: float = 0.01, seed: int = 0) -> list[CheckRecord]:
    g, task, F, model = toy_setup("rgcn", seed)
    config = GradRegConfig(method="grug", alpha=alpha, beta=beta, N=3)
    state = PerturbationState.from_config(config, seed, record_increments=True)
    cfg = TrainConfig(epochs=epochs, lr=0.01, seed=seed, hidden_dim=8, regularizer=config)
    train(model, g, cfg, task, F, hooks=make_hooks(config, state, seed))
    v_delta, v_gamma, v_total = variance_probe(state.increments)
    return [
        CheckRecord("variance: v_gamma < alpha^2", f"< {alpha**2:g}", v_gamma, v_gamma < alpha**2),
        CheckRecord("variance: v_delta < beta^2", f"< {beta**2:g}", v_delta, v_delta < beta**2),
        CheckRecord(
            "variance: v_total < alpha^2 + beta^2", f"< {alpha**2 + beta**2:g}", v_total, v_total < alpha**2 + beta**2
        ),
    ]


def _check_taylor(radius: float = 1e-4, seed: int = 0) -> list[CheckRecord]:
    g, task, F, model = trained_toy(seed)
    loss_fn = make_loss_fn(task)
    out = []
    singles = {}
    for side in ("features", "messages"):
        est = taylor_perturbation_check(model, g, F, loss_fn, side, radius, "l2")
        if est is None:
            out.append(CheckRecord(f"taylor: {side}", "rel error < 0.05", float("nan"), False, "zero gradient"))
            continue
        singles[side] = est
        out.append(CheckRecord(f"taylor: {side}", "rel error < 0.05", est.rel_error, est.rel_error < 0.05))
    joint = taylor_perturbation_check(model, g, F, loss_fn, "both", radius, "l2")
    if joint is None or len(singles) < 2:
        out.append(
            CheckRecord("taylor: joint vs sum of sides", "rel diff < 0.10", float("nan"), False, "zero gradient")
        )
    else:
        total = singles["features"].observed_delta_loss + singles["messages"].observed_delta_loss
        rel = abs(joint.observed_delta_loss - total) / max(abs(total), 1e-12)
        out.append(CheckRecord("taylor: joint vs sum of sides", "rel diff < 0.10", rel, rel < 0.10))
    return out


def _check_drop(trials: int = 1000, seed: int = 0) -> list[CheckRecord]:
    g, task, F, model = trained_toy(seed)
    loss_fn = make_loss_fn(task)
    out = []
    one = mc_drop_expectation(model, g, F, loss_fn, "dropmessage", 1.0, trials, seed)
    out.append(
        CheckRecord(
            "drop: keep=1 gap is exactly 0",
            "gap == 0 and ci == 0",
            abs(one.gap),
            one.gap == 0.0 and one.ci_halfwidth == 0.0,
        )
    )
    for method in ("dropmessage", "dropout"):
        half = mc_drop_expectation(model, g, F, loss_fn, method, 0.5, trials, seed)
        near = mc_drop_expectation(model, g, F, loss_fn, method, 0.99, trials, seed)
        out.append(
            CheckRecord(
                f"drop: {method} gap(0.5) > gap(0.99)",
                "strictly greater",
                half.gap - near.gap,
                half.gap > near.gap and half.holds and near.holds,
                f"gap(0.5)={half.gap:.6g} gap(0.99)={near.gap:.6g}",
            )
        )
    lg, _, lF, lmodel = toy_setup("rgcn", seed, layers=1, activation="identity")
    lin = linear_readout_loss((lg.p, lmodel.out_dim), seed)
    est = mc_drop_expectation(lmodel, lg, lF, lin, "dropmessage", 0.5, trials, seed)
    out.append(
        CheckRecord(
            "drop: dropmessage linear model gap within ci",
            "|gap| <= ci",
            abs(est.gap),
            abs(est.gap) <= est.ci_halfwidth,
            f"ci={est.ci_halfwidth:.3g}",
        )
    )
    return out


def _check_diversity(epochs: int = 50, seed: int = 0) -> list[CheckRecord]:
    g, task, F, model = toy_setup("rgcn", seed)
    loss_fn = make_loss_fn(task)
    start = model.snapshot()
    grug = make_hooks(GradRegConfig(method="grug", alpha=0.1, beta=0.01), seed=seed)
    n_grug, _ = count_effective_messages(model, g, F, loss_fn, grug, epochs, train=True, lr=0.01)
    model.load(start)
    drop = make_hooks(GradRegConfig(method="dropmessage", drop_rate=0.3), seed=seed)
    n_drop, n_masks = count_effective_messages(model, g, F, loss_fn, drop, epochs, train=True, lr=0.01)
    return [
        CheckRecord("diversity: grug distinct matrices", f"== {epochs}", n_grug, n_grug == epochs),
        CheckRecord("diversity: dropmessage distinct <= distinct masks", f"<= {n_masks}", n_drop, n_drop <= n_masks),
    ]


VERIFICATION_CHECKS = {
    "gradients": _check_gradients,
    "identities": _check_identities,
    "variance": _check_variance,
    "taylor": _check_taylor,
    "drop": _check_drop,
    "diversity": _check_diversity,
}


def run_verification(groups=None) -> list[CheckRecord]:
    """Run the named check groups (all by default) and return one record per check."""
    records = []
    for name in groups or VERIFICATION_CHECKS:
        if name not in VERIFICATION_CHECKS:
            raise ConfigError(f"unknown verification group {name!r}")
        t0 = time.perf_counter()
        group = VERIFICATION_CHECKS[name]()
        elapsed = time.perf_counter() - t0
        for r in group:
            r.detail = (r.detail + "; " if r.detail else "") + f"group {name} took {elapsed:.1f}s"
        records.extend(group)
    return records


def records_json(records) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    return json.dumps([{k: clean(v) for k, v in asdict(r).items()} for r in records], indent=2)
