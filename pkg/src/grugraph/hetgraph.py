"""Heterogeneous graph data model, file ingestion, synthetic generation and splits.

Edges are kept as a typed, directed edge list. One directed edge carries one
message, so ``k`` (the message count) is always the length of the edge arrays.
Undirected input edges are stored as two directed edges.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, ShapeError, SplitError, StratificationError

_EPS = 1e-9


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Typed nodes, typed directed edges and optional features and labels.

    ``features`` is ``None`` for featureless graphs, in which case ``feature_dim``
    says how wide the generated stand-in features should be (see
    :func:`node_features`). ``labels`` holds one class per node, ``-1`` where a
    node is unlabeled.
    """

    node_type: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    relation_count: int
    feature_dim: int
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int = 0
    node_ids: tuple = field(default=(), repr=False)

    def __post_init__(self):
        for name, dtype in (("node_type", np.int64), ("src", np.int64), ("dst", np.int64), ("rel", np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        if self.features is not None:
            object.__setattr__(self, "features", _frozen(self.features, np.float64))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        validate(self)

    @property
    def p(self) -> int:
        return int(self.node_type.size)

    @property
    def k(self) -> int:
        return int(self.src.size)

    @property
    def labeled_nodes(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(self.labels >= 0)

    def with_edges(self, src, dst, rel) -> HeteroGraph:
        return replace(self, src=src, dst=dst, rel=rel)


def validate(g: HeteroGraph) -> None:
    p = g.node_type.size
    if not (g.src.size == g.dst.size == g.rel.size):
        raise IntegrityError("edge arrays have different lengths")
    if g.src.size:
        if g.src.min() < 0 or g.src.max() >= p or g.dst.min() < 0 or g.dst.max() >= p:
            raise IntegrityError(f"edge endpoint outside [0, {p})")
        if g.rel.min() < 0 or g.rel.max() >= g.relation_count:
            raise IntegrityError(f"relation index outside [0, {g.relation_count})")
    if g.feature_dim < 1:
        raise ShapeError(f"feature_dim must be positive, got {g.feature_dim}")
    if g.features is not None:
        if g.features.shape != (p, g.feature_dim):
            raise ShapeError(f"feature matrix is {g.features.shape}, expected ({p}, {g.feature_dim})")
        if not np.all(np.isfinite(g.features)):
            raise IntegrityError("feature matrix has non-finite entries")
    if g.labels is not None:
        if g.labels.size != p:
            raise ShapeError(f"{g.labels.size} labels for {p} nodes")
        if g.labels.max(initial=-1) >= g.num_classes or g.labels.min(initial=0) < -1:
            raise IntegrityError(f"label class outside [0, {g.num_classes})")


def node_features(g: HeteroGraph, seed: int = 0) -> np.ndarray:
    """The feature matrix, or seeded unit-norm Gaussian rows for featureless graphs."""
    if g.features is not None:
        return np.array(g.features)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((g.p, g.feature_dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# file ingestion


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield no, line


def _int(tok: str, path, no: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, no, f"{what} {tok!r} is not an integer") from None


def load_graph(nodes_path, edges_path, features_path, labels_path=None) -> HeteroGraph:
    ids: dict[str, int] = {}
    types: list[int] = []
    for no, line in _lines(nodes_path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(nodes_path, no, "expected 'node_id<TAB>type_id'")
        if parts[0] in ids:
            raise IntegrityError(f"{nodes_path}:{no}: duplicate node id {parts[0]!r}")
        ids[parts[0]] = len(types)
        t = _int(parts[1], nodes_path, no, "type id")
        if t < 0:
            raise ParseError(nodes_path, no, "type id must be non-negative")
        types.append(t)
    p = len(types)

    src, dst, rel = [], [], []
    for no, line in _lines(edges_path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(edges_path, no, "expected 'src<TAB>dst<TAB>relation_id<TAB>directed_flag'")
        try:
            u, v = ids[parts[0]], ids[parts[1]]
        except KeyError as exc:
            raise IntegrityError(f"{edges_path}:{no}: unknown node {exc.args[0]!r}") from None
        r = _int(parts[2], edges_path, no, "relation id")
        if r < 0:
            raise ParseError(edges_path, no, "relation id must be non-negative")
        if parts[3] not in ("0", "1"):
            raise ParseError(edges_path, no, f"directed flag must be 0 or 1, got {parts[3]!r}")
        src.append(u), dst.append(v), rel.append(r)
        if parts[3] == "0":
            src.append(v), dst.append(u), rel.append(r)
    relation_count = max(rel) + 1 if rel else 1

    features, feature_dim = _load_features(features_path, p)

    labels = None
    num_classes = 0
    if labels_path is not None:
        labels = np.full(p, -1, dtype=np.int64)
        for no, line in _lines(labels_path):
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(labels_path, no, "expected 'node_id<TAB>class_id'")
            if parts[0] not in ids:
                raise IntegrityError(f"{labels_path}:{no}: unknown node {parts[0]!r}")
            c = _int(parts[1], labels_path, no, "class id")
            if c < 0:
                raise ParseError(labels_path, no, "class id must be non-negative")
            labels[ids[parts[0]]] = c
        num_classes = int(labels.max(initial=-1)) + 1

    return HeteroGraph(
        node_type=types,
        src=src,
        dst=dst,
        rel=rel,
        relation_count=relation_count,
        feature_dim=feature_dim,
        features=features,
        labels=labels,
        num_classes=num_classes,
        node_ids=tuple(ids),
    )


def _load_features(path, p: int):
    lines = _lines(path)
    try:
        no, header = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "missing 'p d' or 'NONE d' header") from None
    parts = header.split()
    if len(parts) != 2:
        raise ParseError(path, no, "header must be 'p d' or 'NONE d'")
    d = _int(parts[1], path, no, "feature dimension")
    if d < 1:
        raise ParseError(path, no, "feature dimension must be positive")
    if parts[0] == "NONE":
        return None, d
    rows_declared = _int(parts[0], path, no, "row count")
    if rows_declared != p:
        raise ShapeError(f"{path}: header declares {rows_declared} rows for {p} nodes")
    rows = []
    for no, line in lines:
        vals = line.split()
        if len(vals) != d:
            raise ParseError(path, no, f"expected {d} values, got {len(vals)}")
        try:
            row = [float(v) for v in vals]
        except ValueError:
            raise ParseError(path, no, "non-numeric feature value") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(path, no, "non-finite feature value")
        rows.append(row)
    if len(rows) != p:
        raise ShapeError(f"{path}: {len(rows)} feature rows for {p} nodes")
    return np.array(rows, dtype=np.float64).reshape(p, d), d


def save_graph(g: HeteroGraph, directory) -> dict[str, Path]:
    """Write ``g`` in the four-file text format; every edge is written as directed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"{name}.txt" for name in ("nodes", "edges", "features", "labels")}
    with open(paths["nodes"], "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\t{t}\n" for i, t in enumerate(g.node_type))
    with open(paths["edges"], "w", encoding="utf-8") as fh:
        fh.writelines(f"{u}\t{v}\t{r}\t1\n" for u, v, r in zip(g.src, g.dst, g.rel))
    with open(paths["features"], "w", encoding="utf-8") as fh:
        if g.features is None:
            fh.write(f"NONE {g.feature_dim}\n")
        else:
            fh.write(f"{g.p} {g.feature_dim}\n")
            fh.writelines(" ".join(repr(float(x)) for x in row) + "\n" for row in g.features)
    if g.labels is not None:
        with open(paths["labels"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\t{g.labels[i]}\n" for i in np.flatnonzero(g.labels >= 0))
    else:
        del paths["labels"]
    return paths


# ---------------------------------------------------------------------------
# synthetic graphs


def synth_graph(
    p_per_type: Sequence[int],
    relation_count: int,
    d: int,
    K: int,
    homophily: float,
    seed: int,
    *,
    edges_per_relation: int = 500,
    class_sep: float = 1.0,
    noise: float = 1.0,
    labeled_types: Sequence[int] = (0,),
) -> HeteroGraph:
    """Block-model heterogeneous graph with class-conditioned Gaussian features.

    Every node gets a latent class. Relation ``r`` joins the ``r``-th pair of
    node types (cycling through all unordered pairs, same-type pairs last). Each
    undirected edge picks a uniform source node; with probability ``homophily``
    the destination shares its class, otherwise it is drawn from the other
    classes. Only nodes of ``labeled_types`` expose their class as a label.
    """
    sizes = [int(n) for n in p_per_type]
    if not sizes or min(sizes) <= 0:
        raise ConfigError(f"every node type needs at least one node, got {sizes}")
    if not 0.0 <= homophily <= 1.0:
        raise ConfigError(f"homophily must lie in [0, 1], got {homophily}")
    if relation_count < 1 or d < 1 or K < 2 or edges_per_relation < 0:
        raise ConfigError("relation_count >= 1, d >= 1, K >= 2 and edges_per_relation >= 0 are required")
    rng = np.random.default_rng(seed)
    node_type = np.repeat(np.arange(len(sizes)), sizes)
    p = node_type.size
    classes = rng.integers(0, K, size=p)
    means = rng.standard_normal((K, d)) * class_sep
    features = means[classes] + noise * rng.standard_normal((p, d))

    n_types = len(sizes)
    pairs = [(a, b) for a in range(n_types) for b in range(a + 1, n_types)] + [(a, a) for a in range(n_types)]
    by_type_class = {
        (t, c): np.flatnonzero((node_type == t) & (classes == c)) for t in range(n_types) for c in range(K)
    }
    by_type = {t: np.flatnonzero(node_type == t) for t in range(n_types)}

    src, dst, rel = [], [], []
    for r in range(relation_count):
        ta, tb = pairs[r % len(pairs)]
        us = rng.choice(by_type[ta], size=edges_per_relation)
        same = rng.random(edges_per_relation) < homophily
        for u, s in zip(us, same):
            cu = classes[u]
            if s:
                pool = by_type_class[(tb, cu)]
            else:
                other = [c for c in range(K) if c != cu and by_type_class[(tb, c)].size]
                pool = by_type_class[(tb, other[rng.integers(len(other))])] if other else np.zeros(0, np.int64)
            if pool.size == 0:
                pool = by_type[tb]
            v = pool[rng.integers(pool.size)]
            src += [u, v]
            dst += [v, u]
            rel += [r, r]

    labels = np.where(np.isin(node_type, list(labeled_types)), classes, -1)
    return HeteroGraph(
        node_type=node_type,
        src=src,
        dst=dst,
        rel=rel,
        relation_count=relation_count,
        feature_dim=d,
        features=features,
        labels=labels,
        num_classes=K,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    valid_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if min(fr) <= 0 or sum(fr) > 1 + _EPS:
            raise ConfigError(f"split fractions must be positive and sum to at most 1, got {fr}")

    @property
    def exhaustive(self) -> bool:
        return abs(self.train_fraction + self.valid_fraction + self.test_fraction - 1.0) < _EPS


NODE_SPLIT = SplitSpec(0.2, 0.1, 0.7)
EDGE_SPLIT = SplitSpec(0.25, 0.05, 0.6)


def _counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_valid = int(math.floor(spec.valid_fraction * n + _EPS))
    n_test = int(math.floor(spec.test_fraction * n + _EPS))
    rest = n - n_valid - n_test
    n_train = rest if spec.exhaustive else min(rest, int(math.ceil(spec.train_fraction * n - _EPS)))
    return n_train, n_valid, n_test


def split_labels(g: HeteroGraph, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified train/valid/test node index sets, each sorted ascending."""
    if g.labels is None or g.labeled_nodes.size == 0:
        raise SplitError("graph has no labels")
    rng = np.random.default_rng(spec.seed)
    train, valid, test = [], [], []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size == 0:
            continue
        if members.size < 3:
            raise StratificationError(f"class {c} has {members.size} labeled nodes; stratification needs 3")
        members = rng.permutation(members)
        n_train, n_valid, n_test = _counts(members.size, spec)
        train.append(members[:n_train])
        valid.append(members[n_train : n_train + n_valid])
        test.append(members[n_train + n_valid : n_train + n_valid + n_test])
    return tuple(np.sort(np.concatenate(s)) for s in (train, valid, test))  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    graph: HeteroGraph
    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray


def undirected_units(g: HeteroGraph) -> tuple[np.ndarray, np.ndarray]:
    """Canonical (min, max, rel) keys and the unit id of every directed edge."""
    lo = np.minimum(g.src, g.dst)
    hi = np.maximum(g.src, g.dst)
    keys = np.stack([lo, hi, g.rel], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def split_edges(g: HeteroGraph, spec: SplitSpec) -> EdgeSplit:
    """Split undirected edges per relation; valid and test edges leave the message graph.

    Positive sets are ``(n, 2)`` arrays of node pairs. Edges that fall in no set
    stay in the training graph as message carriers.
    """
    rng = np.random.default_rng(spec.seed)
    units, unit_of_edge = undirected_units(g)
    train, valid, test = [], [], []
    for r in range(g.relation_count):
        ids = np.flatnonzero(units[:, 2] == r)
        if ids.size == 0:
            continue
        if ids.size < 20:
            raise SplitError(f"relation {r} has {ids.size} edges; at least 20 are needed")
        ids = rng.permutation(ids)
        n_train, n_valid, n_test = _counts(ids.size, spec)
        if min(n_train, n_valid, n_test) == 0:
            raise SplitError(f"relation {r} exhausted by split {spec}")
        train.append(ids[:n_train])
        valid.append(ids[n_train : n_train + n_valid])
        test.append(ids[n_train + n_valid : n_train + n_valid + n_test])
    if not train:
        raise SplitError("graph has no edges to split")
    train_u, valid_u, test_u = (np.sort(np.concatenate(s)) for s in (train, valid, test))
    held = np.zeros(len(units), dtype=bool)
    held[valid_u] = True
    held[test_u] = True
    keep = ~held[unit_of_edge]
    graph = g.with_edges(g.src[keep], g.dst[keep], g.rel[keep])
    return EdgeSplit(graph, units[train_u, :2], units[valid_u, :2], units[test_u, :2])


# ---------------------------------------------------------------------------
# attack


def add_random_edges(g: HeteroGraph, ratio: float, seed: int) -> HeteroGraph:
    """Append ``floor(ratio * k / 2)`` random undirected edges (two messages each)."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"attack ratio must lie in [0, 1], got {ratio}")
    n_new = int(math.floor(ratio * g.k / 2 + _EPS))
    if n_new == 0:
        return g
    rng = np.random.default_rng(seed)
    u = rng.integers(0, g.p, size=n_new)
    v = rng.integers(0, g.p, size=n_new)
    present = np.unique(g.rel) if g.k else np.arange(g.relation_count)
    r = present[rng.integers(0, present.size, size=n_new)]
    new_src = np.stack([u, v], axis=1).reshape(-1)
    new_dst = np.stack([v, u], axis=1).reshape(-1)
    new_rel = np.repeat(r, 2)
    return g.with_edges(
        np.concatenate([g.src, new_src]), np.concatenate([g.dst, new_dst]), np.concatenate([g.rel, new_rel])
    )
