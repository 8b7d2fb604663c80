import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from coral.corpus import BOS, EOS, SEP, gen_task
from coral.decoder import (
    DecodeError,
    DecodeOptions,
    GridView,
    MockOracle,
    acceptance_probability,
    accept_token,
    build_candidate_tree,
    contrastive_score,
    decode,
    dependency_weights,
    ensemble_distribution,
    ensemble_log_distribution,
    greedy_decode,
    mock_grid,
    verification_score,
    write_trace,
)
from coral.model import CoralTransformer, ModelConfig, OffsetConfig


def view_with(entries, offsets, length=8, vocab=4):
    """GridView whose entry ``(i, d)`` is the given distribution; all else unavailable."""
    lp = np.full((length, len(offsets), vocab), -np.log(vocab))
    av = np.zeros((length, len(offsets)), dtype=bool)
    for (i, d), dist in entries.items():
        j = offsets.index(d)
        lp[i, j] = np.log(np.asarray(dist, dtype=np.float64))
        av[i, j] = True
    return GridView(lp, av, offsets, length)


def near_one_hot(tok, vocab=4, mass=0.97):
    p = np.full(vocab, (1 - mass) / (vocab - 1))
    p[tok] = mass
    return p


class TestWeights:
    def test_single(self):
        assert dependency_weights([1], OffsetConfig(), [0.3]).tolist() == [1.0]

    def test_lambda_normalization(self):
        w = dependency_weights([1, 2], OffsetConfig(lambdas={2: 0.5}), [1.0, 1.0])
        np.testing.assert_allclose(w, [2 / 3, 1 / 3], atol=1e-12)

    def test_zero_confidence_removes_dependency(self):
        w = dependency_weights([1, 0, -1], OffsetConfig(), [1.0, 0.0, 1.0])
        np.testing.assert_allclose(w, [0.5, 0.0, 0.5])

    def test_all_zero_falls_back_to_lambda(self):
        w = dependency_weights([1, 2], OffsetConfig(lambdas={2: 0.5}), [0.0, 0.0])
        np.testing.assert_allclose(w, [2 / 3, 1 / 3])

    def test_empty(self):
        with pytest.raises(DecodeError):
            dependency_weights([], OffsetConfig(), [])


class TestEnsemble:
    def test_single_identity(self):
        lp = np.log(np.array([[0.1, 0.2, 0.7]]))
        np.testing.assert_allclose(ensemble_log_distribution(lp, np.array([1.0])), lp[0], atol=1e-12)

    def test_geometric_mean_hand_case(self):
        lp = np.log(np.array([[0.9, 0.1], [0.5, 0.5]]))
        np.testing.assert_allclose(ensemble_distribution(lp, np.array([0.5, 0.5])), [0.75, 0.25], atol=1e-6)

    def test_log_space_hand_case(self):
        # one dependency with log-scores [ln 3, ln 1]
        lp = np.log(np.array([[3.0, 1.0]]) / 4)
        np.testing.assert_allclose(ensemble_distribution(lp, np.array([1.0])), [0.75, 0.25], atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        lp = np.log(rng.dirichlet(np.ones(6), size=3))
        w = np.array([0.2, 0.5, 0.3])
        perm = [2, 0, 1]
        np.testing.assert_allclose(ensemble_log_distribution(lp, w), ensemble_log_distribution(lp[perm], w[perm]))

    def test_dimension_mismatch(self):
        with pytest.raises(DecodeError):
            ensemble_log_distribution(np.zeros((2, 3)), np.ones(3))

    @settings(max_examples=200)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(2, 10))
    def test_unanimous_argmax(self, seed, n, v):
        rng = np.random.default_rng(seed)
        target = int(rng.integers(v))
        p = rng.dirichlet(np.ones(v), size=n)
        p[:, target] = p.max(1) + 0.1
        p /= p.sum(1, keepdims=True)
        w = rng.dirichlet(np.ones(n))
        assert int(np.argmax(ensemble_log_distribution(np.log(p), w))) == target


class TestScores:
    oc = OffsetConfig(k_fwd=3, k_bwd=2)
    offsets = (-1, 0, 1, 2, 3)

    def test_verification_single_term(self):
        view = view_with({(2, 1): [0.5, 0.25, 0.125, 0.125]}, self.offsets)
        assert verification_score(view, 3, 1, self.oc) == pytest.approx(math.log(0.25))

    def test_verification_mean(self):
        e = math.exp
        view = view_with({(2, 1): [e(-1), 1 - e(-1) - 0.01, 0.005, 0.005],
                          (3, 0): [e(-3), 1 - e(-3) - 0.01, 0.005, 0.005]}, self.offsets)
        assert verification_score(view, 3, 0, self.oc) == pytest.approx(-2.0)

    def test_verification_fixed_point(self):
        e = math.exp
        base = {(2, 1): [e(-1), 1 - e(-1) - 0.01, 0.005, 0.005], (3, 0): [e(-3), 1 - e(-3) - 0.01, 0.005, 0.005]}
        extra = dict(base)
        extra[(4, -1)] = [e(-2), 1 - e(-2) - 0.01, 0.005, 0.005]
        assert verification_score(view_with(extra, self.offsets), 3, 0, self.oc) == pytest.approx(-2.0)

    def test_verification_no_terms(self):
        with pytest.raises(DecodeError):
            verification_score(view_with({}, self.offsets), 3, 0, self.oc)

    def test_contrastive_hand_case(self):
        e = math.exp
        view = view_with({(2, 1): [e(-0.1), 1 - e(-0.1) - 0.002, 0.001, 0.001],
                          (1, 2): [e(-2.3), 1 - e(-2.3) - 0.002, 0.001, 0.001]}, self.offsets)
        assert contrastive_score(view, 3, 0, self.oc) == pytest.approx(2.2)

    def test_contrastive_vacuous_and_clamped(self):
        view = view_with({(2, 1): [0.7, 0.1, 0.1, 0.1]}, self.offsets)
        assert contrastive_score(view, 3, 0, self.oc) == 0.0
        view = view_with({(2, 1): [0.1, 0.7, 0.1, 0.1], (1, 2): [0.7, 0.1, 0.1, 0.1]}, self.offsets)
        assert contrastive_score(view, 3, 0, self.oc) == 0.0

    def test_acceptance_counts(self):
        good, bad = near_one_hot(0), near_one_hot(1)
        view = view_with({(2, 1): good, (3, 0): good, (4, -1): bad}, self.offsets)
        assert acceptance_probability(view, 3, 0, self.oc) == pytest.approx(2 / 3)
        view = view_with({(2, 1): good, (3, 0): good}, self.offsets)
        assert acceptance_probability(view, 3, 0, self.oc) == 1.0

    def test_acceptance_uniform_threshold(self):
        # H = ln 4 gives threshold eps/4 = 0.05, and 0.25 clears it
        view = view_with({(2, 1): [0.25] * 4}, self.offsets)
        assert acceptance_probability(view, 3, 2, self.oc) == 1.0
        view = view_with({(2, 1): [0.04, 0.32, 0.32, 0.32]}, self.offsets)
        assert acceptance_probability(view, 3, 0, self.oc) == 0.0

    @pytest.mark.parametrize("c", [0.25, 0.5, 0.75])
    def test_accept_rate_matches_c(self, c):
        rng = np.random.default_rng(int(c * 100))
        rate = np.mean([accept_token(c, rng) for _ in range(10_000)])
        assert abs(rate - c) <= 0.02


def brute_force_top(topk, gamma, budget):
    """Every node of the complete top-k tree with its path score; best ``budget``."""
    scored = []
    for depth in range(len(topk)):
        for ranks in itertools.product(*[range(len(topk[j][1])) for j in range(depth + 1)]):
            s = 1.0
            for j, r in enumerate(ranks):
                s *= topk[j][1][r] / gamma[min(j, len(gamma) - 1)]
            scored.append((s, ranks))
    scored.sort(key=lambda x: -x[0])
    return scored[:budget], scored


def tree_rank_paths(tree):
    return {tuple(tree.nodes[k].rank for k in tree.path(i)) for i in range(len(tree.nodes))}


class TestCandidateTree:
    def test_hand_case(self):
        topk = [([5, 6], [0.6, 0.4]), ([7, 8], [0.9, 0.1])]
        tree = build_candidate_tree(topk, (1.0, 1.1), 3)
        assert [round(n.score, 3) for n in tree.nodes] == [0.6, 0.491, 0.4]
        assert sorted(tree.leaf_paths()) == [[5, 7], [6]]

    def test_budget_one(self):
        tree = build_candidate_tree([([9, 4], [0.7, 0.3])], (1.0,), 1)
        assert [(n.token, n.depth) for n in tree.nodes] == [(9, 0)]

    def test_bad_budget(self):
        with pytest.raises(DecodeError):
            build_candidate_tree([([1], [1.0])], (1.0,), 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        gamma = (1.0, 1.1, 1.2, 1.3)
        checked = 0
        for _ in range(60):
            n_pos = int(rng.integers(1, 5))
            topk = []
            for _ in range(n_pos):
                p = np.sort(rng.dirichlet(np.ones(6)))[::-1][:3]
                topk.append((list(rng.permutation(60)[:3] + 4), list(p)))
            for budget in range(1, 11):
                best, every = brute_force_top(topk, gamma, budget)
                scores = sorted(s for s, _ in every)
                if any(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(scores, scores[1:])):
                    continue
                tree = build_candidate_tree(topk, gamma, budget)
                assert tree_rank_paths(tree) == {r for _, r in best}
                for node in tree.nodes:
                    path = tree.path(tree.nodes.index(node))
                    assert all(tree.nodes[a].depth + 1 == tree.nodes[b].depth for a, b in zip(path, path[1:]))
                checked += 1
        assert checked > 300

    def test_unit_gamma_orders_by_joint_probability(self):
        topk = [([1, 2, 3], [0.5, 0.3, 0.2]), ([4, 5, 6], [0.6, 0.25, 0.15])]
        tree = build_candidate_tree(topk, (1.0,), 12)
        scores = [n.score for n in tree.nodes]
        assert scores == sorted(scores, reverse=True)


def small_model(seed=0, offsets=None):
    cfg = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=2, max_seq_len=48)
    model = CoralTransformer(cfg, offsets or OffsetConfig(k_fwd=3, k_bwd=3), seed=seed)
    with torch.no_grad():
        model.embed.weight.mul_(50)  # sharper, varied next-token choices
    return model


def truth_for(sample):
    return sample.context() + sample.target[:-1]


class TestDecode:
    def test_ar_reduction(self):
        model = small_model()
        oc = OffsetConfig(k_fwd=1, k_bwd=0, block_size=1)
        opts = DecodeOptions(use_verifier=False, max_len=12)
        for s in gen_task("copy", 7, 30):
            assert decode(model, s.context(), oc, opts).tokens == greedy_decode(model, s.context(), 12)

    def test_oracle_exact_and_fast(self):
        rng = np.random.default_rng(0)
        cont = [int(v) for v in rng.integers(4, 64, size=40)]
        prompt = [BOS, 10, 11, SEP]
        mock = MockOracle(prompt + cont, 1.0)
        res = decode(mock, prompt, OffsetConfig(k_fwd=4, block_size=64), DecodeOptions(use_verifier=False))
        assert res.tokens == cont + [EOS] and res.complete
        assert res.tokens_per_call >= 3

    @pytest.mark.parametrize("verifier", [True, False])
    def test_imperfect_forward_still_exact(self, verifier):
        cont = list(range(10, 40))
        prompt = [BOS, 5, SEP]
        alpha = {1: 1.0, 2: 0.6, 3: 0.4, 4: 0.3, **{d: 1.0 for d in range(-7, 1)}}
        mock = MockOracle(prompt + cont, alpha, seed=3)
        res = decode(mock, prompt, OffsetConfig(), DecodeOptions(use_verifier=verifier, seed=1))
        assert res.tokens == cont + [EOS]
        assert res.model_calls < len(res.tokens)

    def test_deterministic(self):
        cont = list(range(10, 30))
        runs = []
        for _ in range(2):
            mock = MockOracle([BOS, SEP] + cont, 0.7, seed=5)
            runs.append(decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions(seed=9)))
        assert runs[0].tokens == runs[1].tokens and runs[0].trace == runs[1].trace

    def test_no_multi_forward_frontier(self):
        mock = MockOracle([BOS, SEP] + list(range(10, 30)), 1.0)
        res = decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions(use_multi_forward=False))
        for rec in res.trace:
            assert rec["t_e"] <= rec["t_s"]
        assert res.tokens_per_call <= 1.0

    def test_min_refinements(self):
        mock = MockOracle([BOS, SEP] + list(range(10, 30)), 1.0)
        res = decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions(use_verifier=False, min_refinements=3))
        residency = {}
        for rec in res.trace:
            for pos in range(rec["t_s"], rec["t_e"] + 1):
                residency[pos] = residency.get(pos, 0) + 1
            start = rec["t_s"]
            for pos in range(start, start + rec["accepted_prefix_len"]):
                assert residency[pos] >= 3
        assert res.tokens == list(range(10, 30)) + [EOS]

    def test_truncation(self):
        mock = MockOracle([BOS, SEP] + list(range(10, 60)), 1.0)
        res = decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions(max_len=10))
        assert len(res.tokens) == 10 and not res.complete

    def test_livelock_guard_terminates(self):
        mock = MockOracle([BOS, SEP] + list(range(10, 30)), 0.0, seed=2)
        res = decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions(use_verifier=False, max_len=12, max_stall=4))
        assert len(res.tokens) <= 12
        assert any(rec["forced"] for rec in res.trace)
        for a, b in zip(res.trace, res.trace[1:]):
            assert b["t_s"] >= a["t_s"]

    def test_bad_inputs(self):
        mock = MockOracle([BOS, SEP, 10], 1.0, max_seq_len=8)
        with pytest.raises(DecodeError):
            decode(mock, [], OffsetConfig())
        with pytest.raises(DecodeError):
            decode(mock, [BOS] * 8, OffsetConfig())

    def test_real_model_runs(self):
        model = small_model(offsets=OffsetConfig(k_fwd=3, k_bwd=3, block_size=8))
        s = gen_task("copy", 0, 1)[0]
        res = decode(model, s.context(), model.offset_config, DecodeOptions(max_len=10, node_budget=8))
        assert 1 <= len(res.tokens) <= 10

    def test_trace_export(self, tmp_path):
        mock = MockOracle([BOS, SEP] + list(range(10, 20)), 0.8, seed=1)
        res = decode(mock, [BOS, SEP], OffsetConfig(), DecodeOptions())
        path = write_trace(res, tmp_path / "trace.jsonl")
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == res.iterations
        keys = {"t_s", "t_e", "candidates_considered", "chosen", "c", "accepted_prefix_len"}
        assert all(keys <= set(r) for r in records)
        assert all(len(r["c"]) == len(r["chosen"]) == r["t_e"] - r["t_s"] + 1 for r in records)


class TestMockOracle:
    @pytest.mark.parametrize("alpha,expected", [(1.0, 1.0), (0.0, 0.0)])
    def test_extremes(self, alpha, expected):
        truth = list(range(4, 60))
        grid = mock_grid(MockOracle(truth, alpha), truth[:30], [1, 2, -1])
        mode = grid.log_probs[0].argmax(-1).numpy()
        for j, d in enumerate(grid.offsets):
            for i in range(30):
                if grid.available[i, j] and i + d < len(truth):
                    assert (mode[i, j] == truth[i + d]) == bool(expected)

    def test_alpha_monte_carlo(self):
        truth = list(range(4, 54))
        oracle = MockOracle(truth, {2: 0.8}, seed=0)
        hits = total = 0
        while total < 10_000:
            grid = mock_grid(oracle, truth[:40], [2])
            mode = grid.log_probs[0, :40, 0].argmax(-1).numpy()
            for i in range(40):
                hits += mode[i] == truth[i + 2]
                total += 1
        assert abs(hits / total - 0.8) <= 0.01

    def test_mode_mass(self):
        grid = mock_grid(MockOracle(list(range(4, 20)), 1.0), list(range(4, 10)), [1])
        p = grid.log_probs[0, 0, 0].exp()
        assert p.max().item() == pytest.approx(0.9)
        assert p.sum().item() == pytest.approx(1.0)
