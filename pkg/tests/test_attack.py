import itertools

import numpy as np
import pytest
import torch

import gangforge.attack as attack_mod
from gangforge.attack import (
    AttackModel,
    CheckpointMismatch,
    attack_forward,
    attack_loss,
    build_input_sequence,
    cosine_scores,
    evaluate_loss,
    generate_attributes,
    generate_edges,
    load_attack,
    run_attack,
    run_structure_encoder,
    save_attack,
    select_candidates,
    train_attack,
)
from gangforge.detector import predict_scores, save_detector
from gangforge.graph import (
    AttributedGraph,
    ConfigError,
    GraphStatistics,
    apply_injection,
    compute_statistics,
    k_hop_neighbors,
    validate_plan,
)

from conftest import random_graph, small_attack_config, target_set, untrained_surrogate


def make_model(graph, **kw):
    return AttackModel(small_attack_config(**kw), untrained_surrogate(graph.attr_dim))


def encoded(model, graph, ts, gen_seed=0):
    gen = torch.Generator().manual_seed(gen_seed)
    cand = select_candidates(model, graph, ts, False)
    return cand, run_structure_encoder(model, build_input_sequence(model, graph, ts, cand, gen))


class FixedScorer(torch.nn.Module):
    def __init__(self, scores):
        super().__init__()
        self.scores = torch.tensor(scores)

    def forward(self, *args):
        return self.scores


class TestCandidates:
    def test_small_neighborhood_returns_all(self, graph50):
        model = make_model(graph50, n_c=128)
        ts = target_set(graph50, [0, 1], 1, 2)
        cand = select_candidates(model, graph50, ts, training=True, tau=1.0, epsilon=1.0)
        assert cand.nodes == sorted(k_hop_neighbors(graph50, [0, 1], 2))

    def test_hand_set_scores(self):
        # star: target 0 with neighbors 1, 2, 3
        g = AttributedGraph(4, [(0, 1), (0, 2), (0, 3)], np.eye(4, 3))
        model = make_model(g, n_c=2)
        model.scorer = FixedScorer([3.0, 1.0, 2.0])
        cand = select_candidates(model, g, target_set(g, [0], 1, 1), training=False)
        assert cand.nodes == [1, 3]

    def test_isolated_targets(self):
        g = AttributedGraph(3, [(1, 2)], np.eye(3, 2))
        model = make_model(g)
        assert select_candidates(model, g, target_set(g, [0], 1, 1), training=False).nodes == []


class TestSequence:
    def test_single_attack_node_starts_at_zero(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [0, 1], 1, 2)
        seq = build_input_sequence(model, graph50, ts, select_candidates(model, graph50, ts, False))
        assert torch.equal(seq.attack_block, model.pos_attack.detach().unsqueeze(0))

    def test_identical_targets_identical_rows(self):
        # nodes 0 and 1 are structurally and attributively identical
        x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        g = AttributedGraph(4, [(0, 2), (1, 2), (2, 3)], x)
        model = make_model(g)
        ts = target_set(g, [0, 1], 1, 2)
        seq = build_input_sequence(model, g, ts, select_candidates(model, g, ts, False))
        assert torch.allclose(seq.target_block[0], seq.target_block[1])

    def test_zero_layers_is_identity(self, graph50):
        model = make_model(graph50, L=0)
        ts = target_set(graph50, [0, 1], 2, 4)
        seq = build_input_sequence(model, graph50, ts, select_candidates(model, graph50, ts, False),
                                   torch.Generator().manual_seed(0))
        out = run_structure_encoder(model, seq)
        assert torch.equal(out.stacked(), seq.stacked()) and out.layer == 0

    def test_attention_rows_sum_to_one(self, graph50):
        model = make_model(graph50)
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 2, 4))
        assert len(seq_L.attention) == model.config.L
        for attn in seq_L.attention:
            assert torch.allclose(attn.sum(-1), torch.ones(attn.shape[:-1]), atol=1e-5)

    def test_mask_hides_attack_nodes_from_targets(self, graph50):
        model = make_model(graph50, mask_attack_nodes=True)
        ts = target_set(graph50, [0, 1], 3, 6)
        cand = select_candidates(model, graph50, ts, False)
        a = build_input_sequence(model, graph50, ts, cand, torch.Generator().manual_seed(0))
        b = build_input_sequence(model, graph50, ts, cand, torch.Generator().manual_seed(99))
        assert not torch.allclose(a.attack_block, b.attack_block)
        out_a, out_b = run_structure_encoder(model, a), run_structure_encoder(model, b)
        keep = a.m + a.alpha
        assert torch.allclose(out_a.stacked()[:keep], out_b.stacked()[:keep], atol=1e-6)
        for attn in out_a.attention:
            assert torch.all(attn[:, :keep, keep:] == 0)


class TestAttributes:
    def test_continuous_rescale(self, graph50):
        model = make_model(graph50)
        with torch.no_grad():
            model.attr_head.weight.zero_()
            model.attr_head.bias.zero_()
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 1, 2))
        stats = GraphStatistics(1.0, 1.0, np.full(4, 2.0), np.full(4, 6.0), 1)
        x = generate_attributes(model, seq_L, stats, "continuous", 1.0, 0.0, False)
        assert torch.allclose(x, torch.full((1, 4), 4.0))

    def test_continuous_range(self, graph50):
        model = make_model(graph50)
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 3, 6))
        stats = compute_statistics(graph50, [target_set(graph50, [0], 1, 1)])
        x = generate_attributes(model, seq_L, stats, "continuous", 1.0, 0.0, False).detach().numpy()
        assert np.all(x >= stats.attr_min - 1e-6) and np.all(x <= stats.attr_max + 1e-6)

    def test_discrete_deterministic_topk(self):
        g = random_graph(30, 0.1, seed=1, kind="discrete")
        model = make_model(g)
        F_row = torch.tensor([0.9, 0.1, 0.8, 0.2])
        with torch.no_grad():
            model.attr_head.weight.zero_()
            model.attr_head.bias.copy_(torch.log(F_row / (1 - F_row)))
        _, seq_L = encoded(model, g, target_set(g, [0], 1, 1))
        stats = GraphStatistics(1.0, 1.0, np.zeros(4), np.ones(4), 2)
        x = generate_attributes(model, seq_L, stats, "discrete", 1.0, 0.0, False)
        assert np.flatnonzero(x.detach().numpy()[0]).tolist() == [0, 2]

    def test_discrete_rows_have_lambda_ones(self):
        g = random_graph(30, 0.1, seed=1, kind="discrete")
        model = make_model(g)
        stats = GraphStatistics(1.0, 1.0, np.zeros(4), np.ones(4), 3)
        gen = torch.Generator().manual_seed(0)
        for i in range(100):
            _, seq_L = encoded(model, g, target_set(g, [0, 1], 2, 2), gen_seed=i)
            x = generate_attributes(model, seq_L, stats, "discrete", 0.5, 2.0, True, gen).detach().numpy()
            assert set(np.unique(x).tolist()) <= {0.0, 1.0}
            assert np.all(x.sum(axis=1) == 3)

    def test_unknown_kind(self, graph50):
        model = make_model(graph50)
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 1, 2))
        stats = compute_statistics(graph50, [target_set(graph50, [0], 1, 1)])
        with pytest.raises(ConfigError):
            generate_attributes(model, seq_L, stats, "ordinal", 1.0, 0.0, False)


def edge_check(plan, ts, graph):
    validate_plan(graph, plan, ts)
    assert plan.num_attack_nodes == ts.node_budget
    assert plan.num_edges <= ts.edge_budget


class TestEdges:
    def test_only_mandatory_edges(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [0, 1, 2], 2, 2)
        plan = run_attack(model, graph50, ts)
        assert plan.num_edges == 2 and plan.attack_edges == ()
        assert sorted(i for i, _ in plan.original_edges) == [0, 1]
        assert all(v in ts.members for _, v in plan.original_edges)

    def test_cosine_of_identical_rows(self, graph50):
        model = make_model(graph50)
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 2, 4))
        same = seq_L.split(torch.ones(seq_L.M, model.config.D_H), seq_L.layer)
        assert torch.allclose(cosine_scores(model, same), torch.ones(2, seq_L.M), atol=1e-6)

    def test_cosine_range(self, graph50):
        model = make_model(graph50)
        _, seq_L = encoded(model, graph50, target_set(graph50, [0, 1], 3, 6))
        s = cosine_scores(model, seq_L)
        assert s.min() >= -1 - 1e-6 and s.max() <= 1 + 1e-6

    def test_invariants_random_instances(self, graph50):
        rng = np.random.default_rng(0)
        gen = torch.Generator().manual_seed(0)
        models = [make_model(graph50, seed=s) for s in range(10)]
        for trial in range(100):
            model = models[trial // 10]
            members = rng.choice(50, size=int(rng.integers(1, 5)), replace=False).tolist()
            delta = int(rng.integers(1, 4))
            ts = target_set(graph50, members, delta, delta * int(rng.integers(1, 5)))
            out = attack_forward(model, graph50, ts, tau=1.0, epsilon=1.0, training=True, generator=gen)
            edge_check(out.plan, ts, graph50)

    def test_budget_below_delta(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [0, 1], 2, 4)
        _, seq_L = encoded(model, graph50, ts)
        bad = ts.__class__(ts.set_id, ts.members, ts.closed_neighborhood_size, 2, 2)
        object.__setattr__(bad, "edge_budget", 1)
        with pytest.raises(ConfigError):
            generate_edges(model, seq_L, bad, [], 1.0, 0.0, False)

    def test_adaptive_degrees_witnessed(self, graph50):
        gen = torch.Generator().manual_seed(1)
        ts = target_set(graph50, [0, 1, 2], 2, 6)
        seen = set()
        for seed in range(40):
            model = make_model(graph50, seed=seed)
            out = attack_forward(model, graph50, ts, tau=1.0, epsilon=1.0, training=True, generator=gen)
            seen.add(tuple(out.plan.attack_degrees().tolist()))
            if any(a != b for a, b in seen):
                break
        assert any(a != b for a, b in seen)


class TestLoss:
    @pytest.mark.parametrize("scores,expected", [
        ([[0.2, 0.8]], 0.6),
        ([[0.9, 0.1]], 0.0),
        ([[0.2, 0.8], [0.9, 0.1]], 0.3),
    ])
    def test_examples(self, scores, expected):
        assert attack_loss(torch.tensor(scores)).item() == pytest.approx(expected)

    def test_empty(self):
        with pytest.raises(ValueError):
            attack_loss(torch.zeros(0, 2))


class TestForward:
    def test_surrogate_receives_no_gradient(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [0, 1, 2], 2, 6)
        out = attack_forward(model, graph50, ts, 1.0, 1.0, True, torch.Generator().manual_seed(0))
        (out.target_scores.sum() + out.loss).backward()
        assert all(p.grad is None for p in model.surrogate.parameters())
        assert model.edge_head.weight.grad is not None and model.attr_head.weight.grad is not None
        assert model.layers[0].attention.qkv.weight.grad is not None

    def test_scores_match_applied_plan(self, graph50):
        model = make_model(graph50)
        for members, delta, eta in [([0, 1, 2], 2, 6), ([5], 1, 1), ([7, 8, 9, 10], 3, 9)]:
            ts = target_set(graph50, members, delta, eta)
            out = attack_forward(model, graph50, ts, 0.01, 0.0, False, attack_mod.inference_generator(model, ts))
            perturbed = apply_injection(graph50, out.plan, ts)
            direct = predict_scores(model.surrogate, perturbed, ts.members)
            assert np.allclose(out.target_scores.detach().numpy(), direct, atol=1e-5)

    def test_single_target_minimal_budget(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [4], 1, 1)
        plan = run_attack(model, graph50, ts)
        assert plan.num_attack_nodes == 1 and plan.original_edges == ((0, 4),) and plan.attack_edges == ()

    def test_run_attack_deterministic(self, graph50):
        model = make_model(graph50)
        ts = target_set(graph50, [0, 1, 2], 3, 9)
        assert run_attack(model, graph50, ts).equals(run_attack(model, graph50, ts))

    def test_removing_attack_nodes_restores_graph(self, graph50):
        from gangforge.graph import remove_nodes_after

        model = make_model(graph50)
        ts = target_set(graph50, [0, 1, 2], 3, 9)
        perturbed = apply_injection(graph50, run_attack(model, graph50, ts), ts)
        assert remove_nodes_after(perturbed, 50).same_as(graph50)
        # every injected edge has an attack endpoint: original-original edges are untouched
        old = {tuple(e) for e in perturbed.edges.tolist() if max(e) < 50}
        assert old == {tuple(e) for e in graph50.edges.tolist()}


class TestTraining:
    def test_schedule(self):
        cfg = small_attack_config()
        assert cfg.tau(0) == 10 and cfg.epsilon(0) == 10
        assert cfg.tau(15) == 0.01 and cfg.epsilon(15) == 0.01

    def test_training_lowers_loss(self, small_bundle, small_surrogate):
        cfg = small_attack_config(epochs=6, patience=6)
        model = AttackModel(cfg, small_surrogate)
        val = small_bundle.sets_in("val")
        before = evaluate_loss(model, small_bundle.graph, val, cfg.tau_end)
        train_attack(model, small_bundle, cfg)
        after = evaluate_loss(model, small_bundle.graph, val, cfg.tau_end)
        assert after <= before
        assert min(h["val_loss"] for h in model.history) <= before

    def test_patience_zero_stops_at_first_worse(self, small_bundle, small_surrogate, monkeypatch):
        counter = itertools.count()
        monkeypatch.setattr(attack_mod, "evaluate_loss", lambda *a, **k: float(next(counter)))
        cfg = small_attack_config(epochs=10, patience=0)
        model = train_attack(AttackModel(cfg, small_surrogate), small_bundle, cfg)
        assert len(model.history) == 2

    def test_no_training_sets(self, small_bundle, small_surrogate):
        from gangforge.data import DatasetBundle

        b = DatasetBundle(small_bundle.graph, small_bundle.sets_in("test"), small_bundle.train_nodes,
                          small_bundle.val_nodes, small_bundle.test_nodes)
        with pytest.raises(ConfigError):
            train_attack(AttackModel(small_attack_config(), small_surrogate), b)

    def test_deterministic_and_checkpoint(self, tmp_path, small_bundle, small_surrogate):
        cfg = small_attack_config(epochs=2)
        a = train_attack(AttackModel(cfg, small_surrogate), small_bundle, cfg)
        b = train_attack(AttackModel(cfg, small_surrogate), small_bundle, cfg)
        for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(v, w), k
        save_detector(small_surrogate, tmp_path / "s.ckpt")
        save_attack(a, tmp_path / "a.ckpt", tmp_path / "s.ckpt")
        back = load_attack(tmp_path / "a.ckpt")
        ts = small_bundle.sets_in("test")[0]
        assert run_attack(back, small_bundle.graph, ts).equals(run_attack(a, small_bundle.graph, ts), atol=1e-6)

    def test_checkpoint_refuses_other_surrogate(self, tmp_path, small_bundle, small_surrogate):
        model = AttackModel(small_attack_config(), small_surrogate)
        save_detector(small_surrogate, tmp_path / "s.ckpt")
        save_attack(model, tmp_path / "a.ckpt", tmp_path / "s.ckpt")
        save_detector(untrained_surrogate(small_bundle.graph.attr_dim, seed=5), tmp_path / "o.ckpt")
        with pytest.raises(CheckpointMismatch):
            load_attack(tmp_path / "a.ckpt", tmp_path / "o.ckpt")
