import numpy as np
import pytest
import torch

from gangforge.ablation import AblationConfig, random_injection, random_injection_plans
from gangforge.attack import AttackModel, attack_forward, build_input_sequence, run_attack, select_candidates
from gangforge.graph import ConfigError, compute_statistics, k_hop_neighbors, validate_plan

from conftest import small_attack_config, target_set, untrained_surrogate


def ablated(graph, **flags):
    return AttackModel(small_attack_config(), untrained_surrogate(graph.attr_dim), AblationConfig(**flags))


def test_conflicting_flags():
    with pytest.raises(ConfigError):
        AblationConfig(no_candidates=True, random_candidates=True)
    with pytest.raises(ConfigError):
        AblationConfig.only("no_such_flag")


def test_labels():
    assert AblationConfig().label == "full"
    assert AblationConfig.only("fixed_budget").enabled() == ["fixed_budget"]


def test_fixed_budget_forces_equal_degrees(graph50):
    model = ablated(graph50, fixed_budget=True)
    ts = target_set(graph50, [0, 1, 2], 2, 6)
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        out = attack_forward(model, graph50, ts, 1.0, 1.0, True, gen)
        assert out.plan.attack_degrees().tolist() == [3, 3]


def test_fixed_budget_remainder_goes_to_low_indices(graph50):
    model = ablated(graph50, fixed_budget=True)
    ts = target_set(graph50, [0, 1, 2], 2, 7)
    validate_plan(graph50, run_attack(model, graph50, ts), ts)
    ts = target_set(graph50, [0, 1, 2], 3, 9)
    assert run_attack(model, graph50, ts).attack_degrees().tolist() == [3, 3, 3]


def test_shared_encoders(graph50):
    model = ablated(graph50, shared_encoder_parameters=True)
    assert model.candidate_encoder is model.target_encoder
    x, d, h = torch.randn(3, 4), torch.rand(3), torch.randn(3, 16)
    assert torch.equal(model.target_encoder(x, d, h), model.candidate_encoder(x, d, h))


def test_no_positional_encoding_is_frozen_zero(graph50):
    model = ablated(graph50, no_positional_encoding=True)
    for p in (model.pos_target, model.pos_candidate, model.pos_attack):
        assert not p.requires_grad and torch.all(p == 0)


def test_no_candidates_endpoints(graph50):
    model = ablated(graph50, no_candidates=True)
    ts = target_set(graph50, [0, 1, 2], 3, 9)
    plan = run_attack(model, graph50, ts)
    assert all(v in ts.members for _, v in plan.original_edges)


def test_random_candidates_subset(graph50):
    model = AttackModel(small_attack_config(n_c=3), untrained_surrogate(4), AblationConfig(random_candidates=True))
    ts = target_set(graph50, [0, 1, 2], 1, 2)
    cand = select_candidates(model, graph50, ts, True, generator=torch.Generator().manual_seed(0))
    assert len(cand.nodes) == 3 and set(cand.nodes) <= k_hop_neighbors(graph50, ts.members, 2)


def test_no_degree_ignores_degrees(graph50):
    model = ablated(graph50, no_degree=True)
    ts = target_set(graph50, [0, 1], 1, 2)
    cand = select_candidates(model, graph50, ts, False)
    a = build_input_sequence(model, graph50, ts, cand)
    ctx = model.context(graph50)
    ctx.degrees.mul_(7.0)
    b = build_input_sequence(model, graph50, ts, cand)
    assert torch.allclose(a.target_block, b.target_block)


@pytest.mark.parametrize("flag", AblationConfig.flag_names())
def test_every_variant_is_budget_valid(graph50, flag):
    model = ablated(graph50, **{flag: True})
    gen = torch.Generator().manual_seed(3)
    for members, delta, eta in [([0, 1, 2], 2, 6), ([9], 1, 1), ([20, 21], 3, 6)]:
        ts = target_set(graph50, members, delta, eta)
        out = attack_forward(model, graph50, ts, 1.0, 1.0, True, gen)
        validate_plan(graph50, out.plan, ts)
        assert out.plan.num_attack_nodes == delta


def test_random_attributes_copy_rows(graph50):
    model = ablated(graph50, random_attributes=True)
    plan = run_attack(model, graph50, target_set(graph50, [0, 1, 2], 3, 6))
    rows = {tuple(r) for r in graph50.attributes.tolist()}
    assert all(tuple(r) in rows for r in plan.attributes.tolist())


class TestRandomInjection:
    def test_minimal(self, graph50):
        ts = target_set(graph50, [4], 1, 1)
        plan = random_injection(graph50, ts, seed=0)
        assert plan.original_edges == ((0, 4),) and plan.num_attack_nodes == 1

    def test_invariants_over_seeds(self, graph50):
        ts = target_set(graph50, [0, 1, 2], 3, 9)
        allowed = set(ts.members) | k_hop_neighbors(graph50, ts.members, 2)
        rows = {tuple(r) for r in graph50.attributes.tolist()}
        for seed in range(100):
            plan = random_injection(graph50, ts, seed=seed)
            validate_plan(graph50, plan, ts)
            assert plan.num_attack_nodes == 3 and plan.num_edges == 9
            assert all(v in allowed for _, v in plan.original_edges)
            assert all(tuple(r) in rows for r in plan.attributes.tolist())

    def test_deterministic(self, graph50):
        ts = target_set(graph50, [0, 1, 2], 3, 9)
        assert random_injection(graph50, ts, seed=5).equals(random_injection(graph50, ts, seed=5))

    def test_plans_per_set(self, small_bundle):
        sets = small_bundle.sets_in("test")
        stats = compute_statistics(small_bundle.graph, small_bundle.target_sets)
        plans = random_injection_plans(small_bundle.graph, sets, stats, seed=1)
        assert sorted(plans) == sorted(t.set_id for t in sets)
        for t in sets:
            validate_plan(small_bundle.graph, plans[t.set_id], t)
            assert np.all(plans[t.set_id].attack_degrees() >= 1)
