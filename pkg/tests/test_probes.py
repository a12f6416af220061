import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from quantlens import corpus, model, probes
from quantlens.errors import InvalidConfig, InvalidInput, TraceIncomplete


@pytest.fixture(scope="module")
def untrained(small_config):
    return model.init_model(small_config, seed=7)


def any_prompt(world, fact_id=0, template_id=0):
    return corpus.supervised_example(world, fact_id, template_id)


class TestLogitLens:
    def test_final_layer_matches_model_output(self, small_world, untrained):
        ids, _, _ = any_prompt(small_world)
        logits, trace = model.forward(untrained, ids,
                                      capture=frozenset(["residual_out"]))
        lens = probes.logit_lens(untrained, trace,
                                 untrained.config.n_layers - 1, -1)
        out = model.softmax64(logits[-1])
        np.testing.assert_allclose(lens, out, atol=1e-6)

    def test_zero_hidden_is_uniform(self, untrained):
        cfg = untrained.config
        trace = model.ForwardTrace(
            logits=np.zeros((3, cfg.vocab_size), np.float32),
            final_hidden=np.zeros((3, cfg.d_model), np.float32),
            residual_out=np.zeros((cfg.n_layers, 3, cfg.d_model), np.float32),
        )
        lens = probes.logit_lens(untrained, trace, 0, 0)
        np.testing.assert_allclose(lens, 1.0 / cfg.vocab_size, rtol=1e-12)

    def test_sums_to_one(self, small_world, untrained):
        ids, _, _ = any_prompt(small_world, 3, 2)
        _, trace = model.forward(untrained, ids,
                                 capture=frozenset(["residual_out"]))
        for layer in range(untrained.config.n_layers):
            for pos in range(len(ids)):
                lens = probes.logit_lens(untrained, trace, layer, pos)
                assert abs(lens.sum() - 1.0) < 1e-9
                assert (lens >= 0).all()

    def test_requires_residual_capture(self, small_world, untrained):
        ids, _, _ = any_prompt(small_world)
        _, trace = model.forward(untrained, ids)
        with pytest.raises(TraceIncomplete):
            probes.logit_lens(untrained, trace, 0, 0)

    def test_range_checks(self, small_world, untrained):
        ids, _, _ = any_prompt(small_world)
        _, trace = model.forward(untrained, ids,
                                 capture=frozenset(["residual_out"]))
        with pytest.raises(InvalidInput):
            probes.logit_lens(untrained, trace, untrained.config.n_layers, 0)
        with pytest.raises(InvalidInput):
            probes.logit_lens(untrained, trace, 0, len(ids))


class TestRank:
    def test_rank_hand_cases(self):
        p = np.array([0.2, 0.3, 0.3, 0.2])
        assert probes.rank_of_target(p, 1) == 1
        assert probes.rank_of_target(p, 2) == 2  # tie, lower id wins
        assert probes.rank_of_target(p, 0) == 3
        assert probes.rank_of_target(p, 3) == 4

    def test_rank_uniform_is_id_order(self):
        p = np.full(6, 1.0 / 6)
        for t in range(6):
            assert probes.rank_of_target(p, t) == t + 1

    def test_rank_bounds(self):
        with pytest.raises(InvalidInput):
            probes.rank_of_target(np.array([0.5, 0.5]), 2)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 50))
    def test_rank_one_iff_argmax_winner(self, seed, n):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(n))
        t = int(rng.integers(0, n))
        rank = probes.rank_of_target(p, t)
        assert (rank == 1) == (t == int(np.argmax(p)))


class TestRankHistogram:
    def test_hand_oracle(self):
        counts = probes.rank_histogram([1, 1, 3])
        assert counts == {"1": 2, "2-5": 1, "6-10": 0, "11-100": 0,
                          "101-1000": 0, ">1000": 0}

    def test_collapse_signature_lands_in_last_bucket(self):
        counts = probes.rank_histogram([1500, 99999, 1001])
        assert counts[">1000"] == 3

    def test_boundaries(self):
        counts = probes.rank_histogram([1, 2, 5, 6, 10, 11, 100, 101, 1000, 1001])
        assert counts == {"1": 1, "2-5": 2, "6-10": 2, "11-100": 2,
                          "101-1000": 2, ">1000": 1}

    def test_rejects_zero_rank(self):
        with pytest.raises(InvalidInput):
            probes.rank_histogram([1, 0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(0, 200))
    def test_counts_sum(self, seed, n):
        rng = np.random.default_rng(seed)
        ranks = rng.integers(1, 5000, size=n)
        assert sum(probes.rank_histogram(ranks).values()) == n


class TestTrajectory:
    def test_memorized_fact_ends_at_rank_one(self, small_world, small_model):
        ids, _, target = any_prompt(small_world, 5, 0)
        traj = probes.target_trajectory(small_model, ids, target)
        assert traj.n_layers == small_model.config.n_layers
        assert traj.ranks[-1] == 1
        assert traj.probs[-1] > 0.5
        assert (traj.probs >= 0).all() and (traj.probs <= 1).all()
        assert (traj.ranks >= 1).all()
        assert (traj.ranks <= small_model.config.vocab_size).all()
        assert (traj.entropy_bits >= 0).all()

    def test_untrained_stays_near_uniform(self, small_world, untrained):
        ids, _, target = any_prompt(small_world, 5, 0)
        traj = probes.target_trajectory(untrained, ids, target)
        v = untrained.config.vocab_size
        assert (traj.probs < 20.0 / v).all()
        assert (traj.entropy_bits > np.log2(v) - 2).all()

    def test_rows_export_shape(self, small_world, small_model):
        ids, _, target = any_prompt(small_world, 2, 1)
        traj = probes.target_trajectory(small_model, ids, target)
        rows = traj.rows()
        assert [r["layer"] for r in rows] == list(range(traj.n_layers))
        assert set(rows[0]) == {"layer", "prob", "rank", "entropy_bits"}

    def test_target_range(self, small_world, small_model):
        ids, _, _ = any_prompt(small_world)
        with pytest.raises(InvalidInput):
            probes.target_trajectory(small_model, ids,
                                     small_model.config.vocab_size)


class TestPeakConfidence:
    def test_hand_cases(self):
        assert probes.peak_confidence_layer(np.array([5.0, 4, 1, 2]), 0) == 2
        assert probes.peak_confidence_layer(np.array([5.0, 4, 3, 2]), 0) == 3
        assert probes.peak_confidence_layer(np.array([3.0, 1, 1]), 0) == 2

    def test_min_layer_excludes_early_minimum(self):
        ents = np.array([0.1, 5.0, 2.0, 3.0])
        assert probes.peak_confidence_layer(ents, 0) == 0
        assert probes.peak_confidence_layer(ents, 1) == 2

    def test_accepts_trajectory(self, small_world, small_model):
        ids, _, target = any_prompt(small_world, 1, 0)
        traj = probes.target_trajectory(small_model, ids, target)
        layer = probes.peak_confidence_layer(traj,
                                             small_model.config.n_layers // 2)
        assert small_model.config.n_layers // 2 <= layer < traj.n_layers

    def test_range_check(self):
        with pytest.raises(InvalidInput):
            probes.peak_confidence_layer(np.array([1.0, 2.0]), 2)


class TestAccuracy:
    def test_hand_aggregates(self, small_world):
        table = {0: [True, True, False]}
        rep = probes.summarize_correctness(small_world, table, (0, 1, 2))
        assert (rep.acc_any, rep.acc_majority, rep.acc_all) == (1.0, 1.0, 0.0)

    def test_majority_is_strict(self, small_world):
        rep = probes.summarize_correctness(small_world, {0: [True, False]},
                                           (0, 1))
        assert rep.acc_any == 1.0
        assert rep.acc_majority == 0.0

    def test_per_relation_breakdown(self, small_world):
        # facts 0 and 1 are relations 0 and 1 of subject 0
        table = {0: [True], 1: [False]}
        rep = probes.summarize_correctness(small_world, table, (0,))
        assert rep.per_relation[0]["any"] == 1.0
        assert rep.per_relation[1]["any"] == 0.0
        assert rep.per_relation[0]["n"] == 1

    def test_memorized_model_is_perfect(self, small_world, small_model):
        rep = probes.accuracy_suite(small_model, small_world)
        assert rep.acc_any == 1.0
        assert rep.acc_all == 1.0
        assert rep.n_facts == small_world.n_facts
        assert all(v["any"] == 1.0 for v in rep.per_relation.values())

    def test_subset_and_single_template(self, small_world, small_model):
        rep = probes.accuracy_suite(small_model, small_world,
                                    fact_ids=[0, 3, 9], template_ids=[0])
        assert rep.n_facts == 3
        assert rep.template_ids == (0,)
        assert rep.acc_any == 1.0

    def test_validation(self, small_world, small_model):
        with pytest.raises(InvalidConfig):
            probes.accuracy_suite(small_model, small_world, template_ids=[])
        with pytest.raises(InvalidInput):
            probes.accuracy_suite(small_model, small_world, fact_ids=[])
        with pytest.raises(InvalidInput):
            probes.summarize_correctness(small_world, {}, (0,))
        with pytest.raises(InvalidInput):
            probes.summarize_correctness(small_world, {0: [True]}, (0, 1))

    def test_json_round_trip_is_plain_data(self, small_world, small_model):
        import json
        rep = probes.accuracy_suite(small_model, small_world,
                                    fact_ids=[0, 1], template_ids=[0, 1])
        doc = json.loads(json.dumps(rep.to_json()))
        assert doc["acc_any"] == rep.acc_any
        assert doc["per_fact"]["0"] == [1, 1]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n_facts=st.integers(1, 20),
           n_templates=st.integers(1, 5))
    def test_aggregate_ordering_property(self, small_world, seed, n_facts,
                                         n_templates):
        rng = np.random.default_rng(seed)
        n_facts = min(n_facts, small_world.n_facts)
        table = {f: list(rng.integers(0, 2, size=n_templates).astype(bool))
                 for f in range(n_facts)}
        rep = probes.summarize_correctness(small_world, table,
                                           tuple(range(n_templates)))
        assert rep.acc_all <= rep.acc_majority <= rep.acc_any
        for stats in rep.per_relation.values():
            assert stats["all"] <= stats["majority"] <= stats["any"]
