import numpy as np
import pytest
import torch

from gangforge.attack import AttackConfig, AttackModel
from gangforge.data import SynthConfig, generate_synthetic_fraud_graph
from gangforge.detector import DetectorConfig, build_detector, train_detector
from gangforge.graph import AttributedGraph, TargetSet


def random_graph(n, p, seed, attr_dim=4, kind="continuous"):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    if kind == "continuous":
        x = rng.normal(size=(n, attr_dim))
    else:
        x = (rng.random((n, attr_dim)) < 0.3).astype(float)
    labels = (rng.random(n) < 0.3).astype(np.int64)
    return AttributedGraph(n, edges, x, kind, labels)


def path_graph(n):
    return AttributedGraph(n, [(i, i + 1) for i in range(n - 1)], np.eye(n, 2))


def target_set(graph, members, delta, eta, set_id=0, split="test"):
    from gangforge.graph import closed_neighborhood_size

    return TargetSet(set_id, tuple(members), closed_neighborhood_size(graph, members), delta, eta, split)


def small_attack_config(**kw):
    base = dict(K=2, n_c=8, L=2, n_h=2, D_H=16, ffn_dim=32, epochs=3, patience=2, seed=0)
    base.update(kw)
    return AttackConfig(**base)


def untrained_surrogate(in_dim, seed=0, dtype=torch.float32):
    model = build_detector(in_dim, DetectorConfig(hidden_dim=16, seed=seed, max_epochs=0, patience=0))
    return model.to(dtype).freeze()


@pytest.fixture
def graph50():
    return random_graph(50, 0.08, seed=11)


@pytest.fixture(scope="session")
def small_bundle():
    cfg = SynthConfig(num_nodes=300, num_gangs=8, seed=3)
    return generate_synthetic_fraud_graph(cfg)


@pytest.fixture(scope="session")
def small_surrogate(small_bundle):
    cfg = DetectorConfig(hidden_dim=16, max_epochs=60, patience=30, seed=0)
    return train_detector(small_bundle, cfg)


@pytest.fixture
def small_attack(small_surrogate):
    return AttackModel(small_attack_config(), small_surrogate)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
