import numpy as np
import pytest

from quantlens import causal, corpus
from quantlens.errors import (
    AlignmentError,
    InvalidInput,
    NotFound,
    TraceIncomplete,
)


@pytest.fixture(scope="module")
def cases(small_world):
    return causal.cases_from_facts(small_world,
                                   range(small_world.n_facts), 0)


@pytest.fixture(scope="module")
def clean_store(small_model, cases):
    return causal.capture_clean_traces(small_model, cases)


class TestCases:
    def test_ids_and_groups(self, small_world, cases):
        assert [c.prompt_id for c in cases[:2]] == [(0, 0), (1, 0)]
        groups = cases[0].groups
        assert groups["mid_subject"] == ()  # two-token subjects
        assert len(groups["last_subject"]) == 1
        assert cases[0].resolved_answer_pos() == len(cases[0].token_ids) - 1

    def test_bad_answer_pos(self):
        case = causal.RepairCase(prompt_id=0, token_ids=(1, 2, 3),
                                 target_id=0, groups={}, answer_pos=3)
        with pytest.raises(InvalidInput):
            case.resolved_answer_pos()


class TestCleanStore:
    def test_size_and_lookup(self, cases, clean_store, small_config):
        assert len(clean_store) == len(cases)
        trace = clean_store.get(cases[0].prompt_id)
        assert trace.shape == (small_config.n_layers,
                               len(cases[0].token_ids),
                               small_config.d_model)

    def test_retrieval_is_stable(self, cases, clean_store):
        a = clean_store.get(cases[3].prompt_id)
        b = clean_store.get(cases[3].prompt_id)
        np.testing.assert_array_equal(a, b)
        assert a is b

    def test_immutable(self, cases, clean_store):
        trace = clean_store.get(cases[0].prompt_id)
        with pytest.raises(ValueError):
            trace[0, 0, 0] = 1.0

    def test_missing_id(self, clean_store):
        with pytest.raises(NotFound):
            clean_store.get(("nope", 9))

    def test_records_model_digest(self, small_model, clean_store):
        assert clean_store.model_digest == small_model.digest()


class TestRepair:
    def test_self_patch_is_null(self, small_model, cases, clean_store):
        grid = causal.cross_model_repair(small_model, clean_store, cases)
        assert np.abs(grid.effects).max() < 1e-9
        assert grid.kind == "repair"
        assert grid.groups == ("first_subject", "last_subject", "relation",
                               "last_token")
        assert grid.layers == tuple(range(small_model.config.n_layers))
        assert (grid.counts == len(cases)).all()
        assert grid.meta["reference_digest"] == clean_store.model_digest

    def test_degraded_model_recovers_probability(self, small_model,
                                                 small_rtn2, cases,
                                                 clean_store):
        grid = causal.cross_model_repair(small_rtn2, clean_store, cases)
        assert np.isfinite(grid.effects).all()
        fp_base = causal.cross_model_repair(small_model, clean_store,
                                            cases, sample_cap=8).base_mean
        # the tiny fixture degrades rather than collapses at 2 bits; the
        # full-scale cliff is an acceptance-level claim
        assert grid.base_mean < fp_base - 0.01
        assert grid.effects.max() > 0.005

    def test_missing_trace(self, small_model, cases):
        partial = causal.capture_clean_traces(small_model, cases[:4])
        with pytest.raises(TraceIncomplete):
            causal.cross_model_repair(small_model, partial, cases)

    def test_shape_mismatch(self, small_model, cases, small_config):
        bad = causal.CleanStore("x", {
            c.prompt_id: np.zeros((small_config.n_layers, 3,
                                   small_config.d_model), np.float32)
            for c in cases
        })
        with pytest.raises(AlignmentError):
            causal.cross_model_repair(small_model, bad, cases)

    def test_sample_cap(self, small_model, cases, clean_store):
        grid = causal.cross_model_repair(small_model, clean_store, cases,
                                         sample_cap=4)
        assert grid.n_prompts == 4
        assert (grid.counts == 4).all()

    def test_window_spans_layers(self, small_rtn2, cases, clean_store):
        cfg_layers = small_rtn2.config.n_layers
        grid = causal.cross_model_repair(small_rtn2, clean_store, cases,
                                         window=2)
        assert grid.layers == tuple(range(cfg_layers - 1))
        assert grid.window == 2
        with pytest.raises(InvalidInput):
            causal.cross_model_repair(small_rtn2, clean_store, cases,
                                      window=cfg_layers + 1)

    def test_order_invariance(self, small_rtn2, cases, clean_store):
        a = causal.cross_model_repair(small_rtn2, clean_store, cases)
        b = causal.cross_model_repair(small_rtn2, clean_store,
                                      list(reversed(cases)))
        np.testing.assert_allclose(a.effects, b.effects, atol=1e-12)

    def test_grid_exports(self, small_rtn2, cases, clean_store):
        grid = causal.cross_model_repair(small_rtn2, clean_store, cases,
                                         sample_cap=8)
        rows = grid.rows()
        assert len(rows) == len(grid.layers) * len(grid.groups)
        assert set(rows[0]) == {"layer", "group", "effect", "stderr", "n"}
        doc = grid.to_json()
        assert doc["kind"] == "repair"
        layer, group = grid.argmax_cell()
        assert grid.cell(layer, group) == grid.effects.max()


class TestAblation:
    def test_fp_model_depends_on_subject_and_readout(self, small_model,
                                                     cases):
        grid = causal.zero_ablation(small_model, cases)
        assert grid.kind == "ablation"
        col = {g: grid.effects[:, grid.groups.index(g)].sum()
               for g in grid.groups}
        informative = col["last_subject"] + col["last_token"]
        background = col["first_subject"] + col["relation"]
        assert informative > background

    def test_effect_bounded_by_base_probability(self, small_model, cases):
        grid = causal.zero_ablation(small_model, cases)
        assert grid.effects.max() <= grid.base_mean + 1e-9

    def test_position_after_readout_is_inert(self, small_world, small_model):
        ids, pos = corpus.render_prompt(small_world, 0, 0)
        _, _, target = corpus.supervised_example(small_world, 0, 0)
        padded = causal.RepairCase(
            prompt_id="padded",
            token_ids=tuple(ids) + (small_world.vocab.id_of("the"),),
            target_id=target,
            groups={"tail": (len(ids),)},
            answer_pos=len(ids) - 1,
        )
        grid = causal.zero_ablation(small_model, [padded],
                                    group_names=("tail",))
        np.testing.assert_array_equal(grid.effects,
                                      np.zeros_like(grid.effects))

    def test_empty_cases(self, small_model):
        with pytest.raises(InvalidInput):
            causal.zero_ablation(small_model, [])


class TestConcentration:
    def test_hand_oracle(self):
        assert causal.effect_concentration(np.array([3.0, 1.0, 0.0, 0.0])) \
            == pytest.approx(0.5, abs=1e-12)

    def test_single_cell_mass(self):
        assert causal.effect_concentration(np.array([0.0, 7.0, 0.0])) == 1.0

    def test_uniform_is_zero(self):
        assert causal.effect_concentration(np.full(8, 0.25)) == 0.0

    def test_sign_ignored(self):
        assert causal.effect_concentration(np.array([-3.0, 1.0, 0.0, 0.0])) \
            == pytest.approx(0.5, abs=1e-12)

    def test_all_zero_flagged(self):
        with pytest.warns(RuntimeWarning):
            assert causal.effect_concentration(np.zeros(6)) == 0.0

    def test_single_element_grid(self):
        assert causal.effect_concentration(np.array([2.0])) == 1.0

    def test_empty_grid(self):
        with pytest.raises(InvalidInput):
            causal.effect_concentration(np.array([]))

    def test_accepts_grid_object(self, small_model, cases):
        grid = causal.zero_ablation(small_model, cases, sample_cap=8)
        value = causal.effect_concentration(grid)
        assert 0.0 <= value <= 1.0
