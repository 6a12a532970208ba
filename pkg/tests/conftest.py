import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from grugraph.hetgraph import HeteroGraph, synth_graph

settings.register_profile("default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a scalar function of the array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def toy_graph() -> HeteroGraph:
    return synth_graph([40, 30, 20], 3, 8, 3, 0.8, 0, edges_per_relation=60)


@pytest.fixture(scope="session")
def bench_graph() -> HeteroGraph:
    return synth_graph([300, 200, 100], 4, 64, 3, 0.7, 0, edges_per_relation=400, class_sep=0.3)


def tiny_graph(edges, p, relation_count=1, features=None, labels=None, num_classes=0, d=2):
    src = [e[0] for e in edges]
    dst = [e[1] for e in edges]
    rel = [e[2] if len(e) > 2 else 0 for e in edges]
    return HeteroGraph(
        node_type=np.zeros(p, dtype=int),
        src=src,
        dst=dst,
        rel=rel,
        relation_count=relation_count,
        feature_dim=d if features is None else np.asarray(features).shape[1],
        features=features,
        labels=labels,
        num_classes=num_classes,
    )
