"""Random-injection baseline and ablation switches for the attack model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .graph import (
    AttributedGraph,
    ConfigError,
    GraphStatistics,
    InjectionPlan,
    TargetSet,
    k_hop_neighbors,
)


@dataclass(frozen=True)
class AblationConfig:
    random_attributes: bool = False
    random_edges: bool = False
    no_positional_encoding: bool = False
    no_degree: bool = False
    shared_encoder_parameters: bool = False
    no_candidates: bool = False
    random_candidates: bool = False
    fixed_budget: bool = False

    def __post_init__(self):
        if self.no_candidates and self.random_candidates:
            raise ConfigError("no_candidates and random_candidates are mutually exclusive")

    @classmethod
    def only(cls, name: str) -> "AblationConfig":
        if name not in cls.flag_names():
            raise ConfigError(f"unknown ablation {name!r}")
        return cls(**{name: True})

    @staticmethod
    def flag_names() -> list[str]:
        return [f.name for f in fields(AblationConfig)]

    def enabled(self) -> list[str]:
        return [k for k, v in asdict(self).items() if v]

    @property
    def label(self) -> str:
        return "+".join(self.enabled()) or "full"


def apply_ablation(model, ablation: AblationConfig):
    """Switch an attack model to an ablated variant; call before training.

    Behavioral switches (random attributes/edges/candidates, no candidates,
    fixed budget, no degree) are read by the forward pass from
    ``model.ablation``; structural ones are applied to the parameters here.
    """
    if not isinstance(ablation, AblationConfig):
        raise ConfigError("ablation must be an AblationConfig")
    model.ablation = ablation
    if ablation.no_positional_encoding:
        for p in (model.pos_target, model.pos_candidate, model.pos_attack):
            with torch.no_grad():
                p.zero_()
            p.requires_grad_(False)
    if ablation.shared_encoder_parameters:
        model.candidate_encoder = model.target_encoder
    return model


def _copy_attributes(graph: AttributedGraph, count: int, rng: np.random.Generator) -> np.ndarray:
    # sampled with replacement
    rows = rng.integers(0, graph.num_nodes, size=count)
    return graph.attributes[rows].copy()


def random_injection(
    graph: AttributedGraph,
    targets: TargetSet,
    stats: GraphStatistics | None = None,
    seed: int = 0,
    K: int = 2,
) -> InjectionPlan:
    """Learning-free baseline: copied attributes and uniformly random wiring.

    Every attack node gets one edge to a random target; the remaining
    ``eta - delta`` edges are drawn without replacement from all allowed pairs
    between attack nodes and (targets, K-hop neighbors, other attack nodes).
    """
    rng = np.random.default_rng(seed)
    delta, eta = targets.node_budget, targets.edge_budget
    attrs = _copy_attributes(graph, delta, rng)
    members = list(targets.members)
    first = [(i, members[int(rng.integers(len(members)))]) for i in range(delta)]
    pool_nodes = members + sorted(k_hop_neighbors(graph, members, K))
    taken = set(first)
    pool = [("o", i, v) for i in range(delta) for v in pool_nodes if (i, v) not in taken]
    pool += [("a", i, j) for i in range(delta) for j in range(i + 1, delta)]
    extra = min(eta - delta, len(pool))
    picks = rng.choice(len(pool), size=extra, replace=False) if extra else []
    to_orig, between = list(first), []
    for p in np.sort(picks):
        kind, a, b = pool[int(p)]
        (to_orig if kind == "o" else between).append((a, b))
    return InjectionPlan(attrs, to_orig, between)


def random_injection_plans(graph, target_sets, stats=None, seed: int = 0, K: int = 2) -> dict[int, InjectionPlan]:
    return {
        t.set_id: random_injection(graph, t, stats, seed=seed * 100_003 + t.set_id, K=K)
        for t in target_sets
    }
