"""Gradient regularizers expressed as feature/message hooks plus an epoch protocol.

Perturbation methods (FLAG, Grug and its ablations) keep trainable additive
perturbations: ``delta`` on the input features with step ``beta``, one ``gamma``
per layer on the message matrix with step ``alpha``, and for the edge variants a
per-relation scalar ``edge`` multiplying each relation's messages with step
``edge_eps``. Each epoch re-draws them uniformly, then runs ``N`` forward/backward
passes, ascending the perturbations along their normalized gradients between
passes while parameter gradients accumulate at ``1/N`` scale. One optimizer step
closes the epoch.

Drop methods mask features (element or row) or messages (element or row) with
inverted-dropout rescaling, drawing fresh masks every epoch.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import MessageMatrix, Model, RegularizerHooks, model_forward
from .errors import ConfigError, ShapeError, StateError
from .hetgraph import HeteroGraph
from .tensor import Tensor

PERTURB_SIDES = {
    # method: (features, messages, relation weights)
    "flag": (True, False, False),
    "grug_n": (True, False, False),
    "grug_m": (False, True, False),
    "grug": (True, True, False),
    "grug_e": (False, False, True),
    "grug_T": (True, True, True),
}
DROP_GRANULARITY = {
    "dropout": "feature_element",
    "dropnode": "feature_row",
    "dropmessage": "message_element",
    "dropedge": "message_row",
}
METHODS = ("clean", *DROP_GRANULARITY, *PERTURB_SIDES)


@dataclass(frozen=True)
class GradRegConfig:
    method: str = "clean"
    drop_rate: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    N: int = 3
    edge_eps: float = 0.0
    norm: str = "l2"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown regularizer method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        for name in ("alpha", "beta", "edge_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N}")
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"norm must be 'l2' or 'linf', got {self.norm!r}")

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.drop_rate

    @property
    def perturbative(self) -> bool:
        return self.method in PERTURB_SIDES


# ---------------------------------------------------------------------------
# perturbation primitives


def init_perturbation(shape, radius: float, seed) -> Tensor:
    """I.i.d. ``Uniform(-radius, radius)`` entries; ``seed`` may be a Generator."""
    if radius < 0:
        raise ConfigError(f"perturbation radius must be non-negative, got {radius}")
    if radius == 0:
        return T.constant(np.zeros(shape))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return T.constant(rng.uniform(-radius, radius, size=shape))


def ascend(pert: Tensor, grad, step: float, norm: str = "l2") -> Tensor:
    """One normalized gradient-ascent step on a perturbation.

    ``l2`` moves by ``step * grad / ||grad||_F``; ``linf`` moves every entry by
    ``step * sign(grad)``. A gradient with Frobenius norm below 1e-12 leaves the
    perturbation where it is.
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != pert.shape:
        raise ShapeError(f"perturbation is {pert.shape} but its gradient is {g.shape}")
    if step < 0:
        raise ConfigError(f"ascent step must be non-negative, got {step}")
    gnorm = float(np.sqrt(np.square(g).sum()))
    if gnorm < 1e-12:
        return T.constant(pert.data.copy())
    direction = g / gnorm if norm == "l2" else np.sign(g)
    return T.constant(pert.data + step * direction)


@dataclass
class PerturbationState:
    """The trainable perturbations of one training run and their generators."""

    alpha: float
    beta: float
    N: int
    edge_eps: float = 0.0
    sides: tuple = (True, True, False)
    norm: str = "l2"
    seed: int = 0
    record_increments: bool = False
    delta: Tensor | None = None
    gammas: list = field(default_factory=list)
    edge: Tensor | None = None
    t: int = 0
    increments: list = field(default_factory=list)

    def __post_init__(self):
        # Independent streams per side, so switching one side off never shifts the other's draws.
        self._rng_delta = np.random.default_rng([self.seed, 1])
        self._rng_gamma = np.random.default_rng([self.seed, 2])
        self._rng_edge = np.random.default_rng([self.seed, 3])

    @classmethod
    def from_config(cls, config: GradRegConfig, seed: int = 0, record_increments: bool = False):
        if not config.perturbative:
            raise ConfigError(f"{config.method} does not use perturbations")
        return cls(
            alpha=config.alpha,
            beta=config.beta,
            N=int(config.N),
            edge_eps=config.edge_eps,
            sides=PERTURB_SIDES[config.method],
            norm=config.norm,
            seed=seed,
            record_increments=record_increments,
        )

    def reset(self, feature_shape, message_shapes: Sequence[tuple], relation_count: int) -> None:
        feat, msg, edge = self.sides
        self.t = 0
        self.delta = self.gammas = self.edge = None  # type: ignore[assignment]
        if feat:
            self.delta = _leaf(init_perturbation(feature_shape, self.beta, self._rng_delta))
        self.gammas = [_leaf(init_perturbation(s, self.alpha, self._rng_gamma)) for s in message_shapes] if msg else []
        if edge:
            self.edge = _leaf(init_perturbation((relation_count, 1), self.edge_eps, self._rng_edge))

    def tensors(self) -> list[Tensor]:
        out = [self.delta] if self.delta is not None else []
        out += self.gammas
        if self.edge is not None:
            out.append(self.edge)
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def step(self) -> None:
        """Ascend every active perturbation along its current gradient."""
        d_delta = d_gamma = None
        if self.delta is not None:
            new = _leaf(ascend(self.delta, _grad(self.delta), self.beta, self.norm))
            d_delta = new.data - self.delta.data
            self.delta = new
        if self.gammas:
            new_gammas = [_leaf(ascend(gm, _grad(gm), self.alpha, self.norm)) for gm in self.gammas]
            d_gamma = np.concatenate([(n.data - o.data).ravel() for n, o in zip(new_gammas, self.gammas)])
            self.gammas = new_gammas
        if self.edge is not None:
            self.edge = _leaf(ascend(self.edge, _grad(self.edge), self.edge_eps, self.norm))
        if self.record_increments:
            self.increments.append((d_delta, d_gamma))
        self.t += 1


def _leaf(t: Tensor) -> Tensor:
    return T.parameter(t.data)


def _grad(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros(t.shape)


# ---------------------------------------------------------------------------
# drop masks


GRANULARITIES = ("feature_element", "feature_row", "message_row", "message_element")


@dataclass
class DropMask:
    keep_prob: float
    granularity: str
    mask: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep probability must lie in (0, 1], got {self.keep_prob}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown drop granularity {self.granularity!r}")

    @classmethod
    def sample(cls, shape, keep_prob: float, granularity: str, rng: np.random.Generator) -> DropMask:
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigError(f"keep probability must lie in (0, 1], got {keep_prob}")
        rows, cols = shape
        if granularity.endswith("_row"):
            keep = rng.random((rows, 1)) < keep_prob
            mask = np.broadcast_to(keep, (rows, cols)).astype(np.float64)
        else:
            mask = (rng.random((rows, cols)) < keep_prob).astype(np.float64)
        return cls(keep_prob, granularity, mask)


def apply_drop(matrix: Tensor, mask: DropMask) -> Tensor:
    """Zero the dropped entries and rescale the kept ones by ``1 / keep_prob``."""
    if mask.mask.shape != matrix.shape:
        raise ShapeError(f"mask is {mask.mask.shape} but the matrix is {matrix.shape}")
    return matrix * T.constant(mask.mask / mask.keep_prob)


# ---------------------------------------------------------------------------
# hooks


class _CapturingHooks(RegularizerHooks):
    """Hooks that can record the first layer's effective message matrix once per epoch."""

    def __init__(self):
        self.training = True
        self.capture = False
        self.captured: list[np.ndarray] = []
        self._fresh = False

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def begin_epoch(self, model: Model, g: HeteroGraph, F: Tensor) -> None:
        self._fresh = True

    def _maybe_capture(self, M: Tensor, layer_idx: int) -> Tensor:
        if self.capture and self._fresh and layer_idx == 0:
            self.captured.append(M.data.copy())
            self._fresh = False
        return M


class CleanHooks(_CapturingHooks):
    def on_messages(self, msg: MessageMatrix, layer_idx: int) -> Tensor:
        return self._maybe_capture(msg.matrix, layer_idx)


class DropHooks(_CapturingHooks):
    def __init__(self, method: str, keep_prob: float, seed: int = 0):
        super().__init__()
        if method not in DROP_GRANULARITY:
            raise ConfigError(f"{method} is not a drop method")
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigError(f"keep probability must lie in (0, 1], got {keep_prob}")
        self.method = method
        self.granularity = DROP_GRANULARITY[method]
        self.keep_prob = keep_prob
        self.rng = np.random.default_rng([seed, 4])
        self.masks: dict = {}
        self.captured_masks: list[np.ndarray] = []

    def begin_epoch(self, model, g, F) -> None:
        super().begin_epoch(model, g, F)
        self.masks = {}

    def _mask(self, key, shape) -> DropMask:
        if key not in self.masks:
            self.masks[key] = DropMask.sample(shape, self.keep_prob, self.granularity, self.rng)
        return self.masks[key]

    def on_features(self, F: Tensor) -> Tensor:
        if not self.training or not self.granularity.startswith("feature"):
            return F
        return apply_drop(F, self._mask("features", F.shape))

    def on_messages(self, msg: MessageMatrix, layer_idx: int) -> Tensor:
        M = msg.matrix
        if not self.training:
            return M
        if self.granularity.startswith("message"):
            # Dropped edges stay dropped in every layer; message masks are drawn per layer.
            key = "edges" if self.granularity == "message_row" else ("messages", layer_idx)
            mask = self._mask(key, M.shape)
            if self.capture and self._fresh and layer_idx == 0:
                self.captured_masks.append(mask.mask.copy())
            M = apply_drop(M, mask)
        return self._maybe_capture(M, layer_idx)


class GrugHooks(_CapturingHooks):
    def __init__(self, state: PerturbationState):
        super().__init__()
        self.state = state

    def begin_epoch(self, model, g, F) -> None:
        super().begin_epoch(model, g, F)
        self.state.reset(F.shape, [(g.k, layer.d_out) for layer in model.layers], g.relation_count)

    def on_features(self, F: Tensor) -> Tensor:
        if not self.training or self.state.delta is None:
            return F
        if self.state.delta.shape != F.shape:
            raise StateError(
                f"feature perturbation is {self.state.delta.shape} but features are {F.shape}; re-initialize"
            )
        return F + self.state.delta

    def on_messages(self, msg: MessageMatrix, layer_idx: int) -> Tensor:
        M = msg.matrix
        if not self.training:
            return M
        st = self.state
        if st.edge is not None:
            M = T.scale_rows(M, T.gather_rows(st.edge + 1.0, msg.rel))
        if st.gammas:
            gamma = st.gammas[layer_idx]
            if gamma.shape != M.shape:
                raise StateError(
                    f"message perturbation is {gamma.shape} but layer {layer_idx} has {M.shape}; re-initialize"
                )
            M = M + gamma
        return self._maybe_capture(M, layer_idx)


def make_hooks(config: GradRegConfig, state: PerturbationState | None = None, seed: int = 0):
    """Feature/message hooks realizing ``config.method``."""
    if config.method == "clean":
        return CleanHooks()
    if config.method in DROP_GRANULARITY:
        return DropHooks(config.method, config.keep_prob, seed)
    if config.method in PERTURB_SIDES:
        if state is None:
            state = PerturbationState.from_config(config, seed)
        return GrugHooks(state)
    raise ConfigError(f"unknown regularizer method {config.method!r}")


# ---------------------------------------------------------------------------
# epoch protocol


@dataclass
class EpochResult:
    loss: float
    grad_l1: float
    grad_l2: float
    inner_losses: list


LossFn = Callable[[Tensor], Tensor]


def grug_epoch(
    model: Model, g: HeteroGraph, F: Tensor, loss_fn: LossFn, hooks: GrugHooks, optimizer=None
) -> EpochResult:
    """One perturbation epoch: ``N`` accumulated passes, ``N - 1`` ascents, one update."""
    state = hooks.state
    hooks.train()
    hooks.begin_epoch(model, g, F)
    model.zero_grad()
    n = state.N
    losses = []
    for t in range(n):
        state.t = t
        state.zero_grad()
        loss = loss_fn(model_forward(F, g, model, hooks))
        T.backward(loss * (1.0 / n))
        losses.append(loss.item())
        if t < n - 1:
            state.step()
    return _finish(model, optimizer, losses)


def plain_epoch(model: Model, g: HeteroGraph, F: Tensor, loss_fn: LossFn, hooks, optimizer=None) -> EpochResult:
    """One forward/backward pass under clean or drop hooks, then one update."""
    if hasattr(hooks, "train"):
        hooks.train()
    if hasattr(hooks, "begin_epoch"):
        hooks.begin_epoch(model, g, F)
    model.zero_grad()
    loss = loss_fn(model_forward(F, g, model, hooks))
    T.backward(loss * 1.0)
    return _finish(model, optimizer, [loss.item()])


def run_epoch(model, g, F, loss_fn, hooks, optimizer=None) -> EpochResult:
    if isinstance(hooks, GrugHooks):
        return grug_epoch(model, g, F, loss_fn, hooks, optimizer)
    return plain_epoch(model, g, F, loss_fn, hooks, optimizer)


def _finish(model: Model, optimizer, losses: list) -> EpochResult:
    params = model.parameters()
    grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    l1, l2 = T.global_norms(grads)
    if optimizer is not None:
        optimizer.step(params)
    return EpochResult(float(np.mean(losses)), l1, l2, losses)
