"""Frozen oracles and invariants for the layer-wise comparison profiles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantlens import corpus, diagnostics
from quantlens.diagnostics import (
    CkaHeatmap,
    LayerCurve,
    activation_matrix,
    attn_entropy_profile,
    attn_jsd_profile,
    cka_heatmap,
    collect_traces,
    error_alignment_profile,
    error_subspace_alignment,
    expert_jaccard_profile,
    gate_sign_flip_rate,
    linear_cka,
    spectral_energy_fraction,
    subspace_profile,
    subspace_similarity,
    value_cosine_profile,
)
from quantlens.errors import InsufficientSamples, InvalidInput, TraceIncomplete
from quantlens.model import ForwardTrace


def trace_with(**sites):
    return ForwardTrace(**{k: np.asarray(v, dtype=np.float32)
                           for k, v in sites.items()})


def causal_rows(rows):
    """Stack per-position rows into a (T, T) causal attention matrix."""
    t = len(rows)
    out = np.zeros((t, t), dtype=np.float64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


class TestAttnEntropy:
    def test_hand_values(self):
        # Layer 0: even split at t=1 and uniform at t=2, both maximally
        # spread. Layer 1: one-hot rows, zero spread. Position 0 is skipped.
        spread = causal_rows([[1.0], [0.5, 0.5], [1 / 3, 1 / 3, 1 / 3]])
        peaked = causal_rows([[1.0], [1.0, 0.0], [0.0, 0.0, 1.0]])
        probs = np.stack([
            np.stack([spread, spread]),
            np.stack([peaked, peaked]),
        ])
        curve = attn_entropy_profile(trace_with(attn_probs=probs))
        assert curve.means == pytest.approx([1.0, 0.0], abs=1e-9)
        assert list(curve.counts) == [4, 4]

    def test_single_position(self):
        spread = causal_rows([[1.0], [0.5, 0.5], [1.0, 0.0, 0.0]])
        probs = spread[None, None]
        one = attn_entropy_profile(trace_with(attn_probs=probs), positions=1)
        assert one.means[0] == pytest.approx(1.0)
        two = attn_entropy_profile(trace_with(attn_probs=probs), positions=2)
        assert two.means[0] == pytest.approx(0.0)

    def test_position_zero_rejected(self):
        probs = causal_rows([[1.0], [0.5, 0.5]])[None, None]
        with pytest.raises(InvalidInput):
            attn_entropy_profile(trace_with(attn_probs=probs), positions=0)

    def test_missing_site(self):
        with pytest.raises(TraceIncomplete):
            attn_entropy_profile(ForwardTrace())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_normalized_range(self, seed):
        rng = np.random.default_rng(seed)
        t = 5
        probs = np.zeros((2, 2, t, t))
        for l in range(2):
            for h in range(2):
                for i in range(t):
                    probs[l, h, i, :i + 1] = rng.dirichlet(np.ones(i + 1))
        curve = attn_entropy_profile(trace_with(attn_probs=probs))
        assert np.all(curve.means >= -1e-9)
        assert np.all(curve.means <= 1.0 + 1e-9)


class TestAttnJsd:
    def test_disjoint_and_identical_heads(self):
        same = causal_rows([[1.0], [0.0, 1.0], [0.0, 1.0, 0.0]])
        left = causal_rows([[1.0], [1.0, 0.0], [1.0, 0.0, 0.0]])
        right = causal_rows([[1.0], [1.0, 0.0], [0.0, 0.0, 1.0]])
        fp = trace_with(attn_probs=np.stack([np.stack([left, same])]))
        qq = trace_with(attn_probs=np.stack([np.stack([right, same])]))
        curve = attn_jsd_profile(fp, qq, position=2)
        # head 0 one-hot rows disagree completely (1 bit), head 1 agrees
        assert curve.means[0] == pytest.approx(0.5, abs=1e-9)

    def test_mean_distribution_mode(self):
        left = causal_rows([[1.0], [1.0, 0.0], [1.0, 0.0, 0.0]])
        right = causal_rows([[1.0], [1.0, 0.0], [0.0, 0.0, 1.0]])
        fp = trace_with(attn_probs=np.stack([np.stack([left, right])]))
        qq = trace_with(attn_probs=np.stack([np.stack([right, left])]))
        # swapped heads: per-head JSD is maximal, head-mixture identical
        per_head = attn_jsd_profile(fp, qq, position=2)
        mixed = attn_jsd_profile(fp, qq, position=2,
                                 aggregation="mean_distribution")
        assert per_head.means[0] == pytest.approx(1.0, abs=1e-9)
        assert mixed.means[0] == pytest.approx(0.0, abs=1e-9)

    def test_identical_traces_zero(self):
        rng = np.random.default_rng(3)
        probs = np.zeros((2, 2, 4, 4))
        for l in range(2):
            for h in range(2):
                for i in range(4):
                    probs[l, h, i, :i + 1] = rng.dirichlet(np.ones(i + 1))
        tr = trace_with(attn_probs=probs)
        curve = attn_jsd_profile(tr, tr, position=-1)
        assert curve.means == pytest.approx([0.0, 0.0], abs=1e-12)

    def test_shape_mismatch(self):
        a = trace_with(attn_probs=np.full((1, 1, 2, 2), 0.5))
        b = trace_with(attn_probs=np.full((1, 2, 2, 2), 0.5))
        with pytest.raises(InvalidInput):
            attn_jsd_profile(a, b, position=1)

    def test_count_mismatch(self):
        tr = trace_with(attn_probs=np.full((1, 1, 2, 2), 0.5))
        with pytest.raises(InvalidInput):
            attn_jsd_profile([tr, tr], [tr], position=1)

    def test_bad_aggregation(self):
        tr = trace_with(attn_probs=np.full((1, 1, 2, 2), 0.5))
        with pytest.raises(InvalidInput):
            attn_jsd_profile(tr, tr, position=1, aggregation="median")


class TestGateSignFlips:
    def gates(self, *rows):
        return trace_with(gate_preact=np.asarray(rows)[:, None, :])

    def test_negated_is_one(self):
        g = np.array([[1.0, -2.0, 3.0, -4.0]])[:, None, :]
        curve = gate_sign_flip_rate(trace_with(gate_preact=g),
                                    trace_with(gate_preact=-g), position=0)
        assert curve.means[0] == pytest.approx(1.0)
        assert curve.extras["exclusion_rate"][0] == 0.0

    def test_identical_is_zero(self):
        g = np.array([[1.0, -2.0, 3.0, -4.0]])[:, None, :]
        tr = trace_with(gate_preact=g)
        assert gate_sign_flip_rate(tr, tr, position=0).means[0] == 0.0

    def test_half_flipped(self):
        a = np.array([[1.0, 1.0, -1.0, -1.0]])[:, None, :]
        b = np.array([[1.0, -1.0, 1.0, -1.0]])[:, None, :]
        curve = gate_sign_flip_rate(trace_with(gate_preact=a),
                                    trace_with(gate_preact=b), position=0)
        assert curve.means[0] == pytest.approx(0.5)

    def test_dead_channels_excluded(self):
        a = np.array([[0.0, 1e-12, 1.0, -1.0]])[:, None, :]
        b = np.array([[1.0, 1.0, 1.0, 1.0]])[:, None, :]
        curve = gate_sign_flip_rate(trace_with(gate_preact=a),
                                    trace_with(gate_preact=b), position=0)
        # two live channels, one of them flipped
        assert curve.means[0] == pytest.approx(0.5)
        assert curve.extras["exclusion_rate"][0] == pytest.approx(0.5)

    def test_all_dead_layer_contributes_no_sample(self):
        a = np.zeros((1, 1, 4))
        curve = gate_sign_flip_rate(trace_with(gate_preact=a),
                                    trace_with(gate_preact=a), position=0)
        assert curve.counts[0] == 0
        assert curve.extras["exclusion_rate"][0] == 1.0


class TestExpertJaccard:
    def test_identical_tops(self):
        v = np.arange(400, dtype=np.float64)[None, None, :]
        tr = trace_with(h_key=v)
        assert expert_jaccard_profile(tr, tr, position=0).means[0] == 1.0

    def test_disjoint_tops(self):
        a = np.zeros((1, 1, 400))
        b = np.zeros((1, 1, 400))
        a[0, 0, :4] = [9, 8, 7, 6]
        b[0, 0, 4:8] = [9, 8, 7, 6]
        curve = expert_jaccard_profile(trace_with(h_key=a),
                                       trace_with(h_key=b), position=0)
        assert curve.means[0] == 0.0

    def test_magnitude_not_sign(self):
        a = np.zeros((1, 1, 400))
        a[0, 0, :4] = [9, 8, 7, 6]
        curve = expert_jaccard_profile(trace_with(h_key=a),
                                       trace_with(h_key=-a), position=0)
        assert curve.means[0] == 1.0

    def test_random_keys_rarely_overlap(self):
        rng = np.random.default_rng(0)
        fp, qq = [], []
        for _ in range(200):
            fp.append(trace_with(h_key=rng.standard_normal((1, 1, 344))))
            qq.append(trace_with(h_key=rng.standard_normal((1, 1, 344))))
        curve = expert_jaccard_profile(fp, qq, position=0)
        assert curve.means[0] < 0.05


class TestValueCosine:
    def test_hand_values(self):
        a = np.array([[[1.0, 0.0]], [[1.0, 1.0]]])
        b = np.array([[[0.0, 1.0]], [[2.0, 2.0]]])
        curve = value_cosine_profile(trace_with(ffn_out=a),
                                     trace_with(ffn_out=b), position=0)
        assert curve.means == pytest.approx([0.0, 1.0])
        assert curve.name == "value_cosine_ffn_out"

    def test_site_choices(self):
        v = np.ones((1, 1, 3))
        for site in ("ffn_out", "residual_out", "attn_out"):
            tr = trace_with(**{site: v})
            curve = value_cosine_profile(tr, tr, position=0, site=site)
            assert curve.means[0] == pytest.approx(1.0)
        with pytest.raises(InvalidInput):
            value_cosine_profile(trace_with(h_key=v), trace_with(h_key=v),
                                 position=0, site="h_key")

    def test_mean_and_std_over_prompts(self):
        base = trace_with(ffn_out=np.array([[[1.0, 0.0]]]))
        same = trace_with(ffn_out=np.array([[[2.0, 0.0]]]))
        orth = trace_with(ffn_out=np.array([[[0.0, 3.0]]]))
        curve = value_cosine_profile([base, base], [same, orth], position=0)
        assert curve.means[0] == pytest.approx(0.5)
        assert curve.stds[0] == pytest.approx(np.std([1.0, 0.0], ddof=1))
        assert curve.counts[0] == 2

    def test_per_prompt_positions(self):
        tr2 = trace_with(ffn_out=np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        tr3 = trace_with(ffn_out=np.array([[[1.0, 0.0], [0.0, 1.0],
                                            [1.0, 1.0]]]))
        curve = value_cosine_profile([tr2, tr3], [tr2, tr3],
                                     position=[1, 2])
        assert curve.means[0] == pytest.approx(1.0)
        with pytest.raises(InvalidInput):
            value_cosine_profile([tr2, tr3], [tr2, tr3], position=[1])
        with pytest.raises(InvalidInput):
            value_cosine_profile([tr2], [tr2], position=7)


class TestLinearCka:
    def test_self_is_exactly_one(self):
        x = np.random.default_rng(1).standard_normal((40, 7))
        assert linear_cka(x, x) == 1.0

    def test_rotation_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((60, 8))
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)
        assert linear_cka(x, 3.7 * x) == pytest.approx(1.0, abs=1e-9)

    def test_independent_gaussians_near_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((500, 50))
        y = rng.standard_normal((500, 50))
        assert linear_cka(x, y) < 0.15

    def test_constant_matrix_is_zero(self):
        x = np.ones((20, 4))
        y = np.random.default_rng(3).standard_normal((20, 4))
        assert linear_cka(x, y) == 0.0
        assert linear_cka(y, x) == 0.0

    def test_row_mismatch(self):
        with pytest.raises(InvalidInput):
            linear_cka(np.ones((10, 3)), np.ones((11, 3)))

    def test_different_widths_allowed(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((30, 3))
        y = rng.standard_normal((30, 9))
        v = linear_cka(x, y)
        assert 0.0 <= v <= 1.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounded_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((25, 5))
        y = rng.standard_normal((25, 6))
        v = linear_cka(x, y)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(linear_cka(y, x), abs=1e-12)


def synthetic_traces(rng, n, layers=3, width=6, length=4, scale=1.0,
                     transform=None):
    out = []
    for _ in range(n):
        acts = rng.standard_normal((layers, length, width)) * scale
        if transform is not None:
            acts = transform(acts)
        out.append(trace_with(residual_out=acts))
    return out


class TestCkaHeatmap:
    def test_self_heatmap_diagonal(self):
        traces = synthetic_traces(np.random.default_rng(5), 40)
        hm = cka_heatmap(traces, traces, position=-1)
        assert hm.values.shape == (3, 3)
        assert np.allclose(np.diag(hm.values), 1.0)
        assert hm.diagonal_mean == pytest.approx(1.0)
        assert hm.n_prompts == 40
        assert hm.site == "residual_out"
        assert np.all(hm.values >= 0.0) and np.all(hm.values <= 1.0)

    def test_too_few_prompts(self):
        traces = synthetic_traces(np.random.default_rng(6), 31)
        with pytest.raises(InsufficientSamples):
            cka_heatmap(traces, traces, position=-1)

    def test_json_round_shape(self):
        traces = synthetic_traces(np.random.default_rng(7), 32)
        doc = cka_heatmap(traces, traces, position=-1).to_json()
        assert len(doc["values"]) == 3
        assert doc["n_prompts"] == 32


class TestSubspace:
    def test_identical_subspace(self):
        x = np.random.default_rng(8).standard_normal((60, 20))
        assert subspace_similarity(x, x, k=5) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_coordinate_blocks(self):
        rng = np.random.default_rng(9)
        x = np.zeros((50, 12))
        y = np.zeros((50, 12))
        x[:, :5] = rng.standard_normal((50, 5))
        y[:, 5:10] = rng.standard_normal((50, 5))
        assert subspace_similarity(x, y, k=3) == pytest.approx(0.0, abs=1e-12)

    def test_k1_is_principal_angle_cosine_squared(self):
        theta = 0.4
        u = np.abs(np.random.default_rng(10).standard_normal(30)) + 0.5
        d = 6
        e1 = np.zeros(d)
        e1[0] = 1.0
        v = np.zeros(d)
        v[0], v[1] = np.cos(theta), np.sin(theta)
        x = np.outer(u, e1)
        y = np.outer(u, v)
        got = subspace_similarity(x, y, k=1)
        assert got == pytest.approx(np.cos(theta) ** 2, abs=1e-9)

    def test_rank_clamp_warns(self):
        u = np.random.default_rng(11).standard_normal(20)
        x = np.outer(u, [1.0, 0.0, 0.0])
        with pytest.warns(RuntimeWarning, match="clamped"):
            v = subspace_similarity(x, x, k=5)
        assert v == pytest.approx(1.0, abs=1e-9)

    def test_rotation_invariance_and_symmetry(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((40, 9))
        y = rng.standard_normal((40, 9))
        q, _ = np.linalg.qr(rng.standard_normal((9, 9)))
        base = subspace_similarity(x, y, k=4)
        assert subspace_similarity(x @ q, y @ q, k=4) == pytest.approx(
            base, abs=1e-9)
        assert subspace_similarity(y, x, k=4) == pytest.approx(base, abs=1e-12)
        assert 0.0 <= base <= 1.0

    def test_zero_matrix_warns(self):
        with pytest.warns(RuntimeWarning):
            v = subspace_similarity(np.zeros((10, 4)), np.ones((10, 4)),
                                    k=2, center=False)
        assert v == 0.0

    def test_bad_k(self):
        x = np.ones((4, 4))
        with pytest.raises(InvalidInput):
            subspace_similarity(x, x, k=0)


class TestSpectralEnergy:
    def test_known_spectrum(self):
        # singular values 2 and 1 -> top-1 holds 4/5 of squared mass
        m = np.zeros((6, 4))
        m[0, 0] = 2.0
        m[1, 1] = 1.0
        assert spectral_energy_fraction(m, k=1, center=False) == pytest.approx(0.8)
        assert spectral_energy_fraction(m, k=2, center=False) == 1.0

    def test_zero_matrix(self):
        assert spectral_energy_fraction(np.zeros((5, 3)), k=2) == 1.0


class TestErrorAlignment:
    def test_no_error_warns_zero(self):
        x = np.random.default_rng(13).standard_normal((30, 6))
        with pytest.warns(RuntimeWarning, match="no quantization error"):
            assert error_subspace_alignment(x, x.copy(), k=2) == 0.0

    def test_proportional_error_aligns(self):
        x = np.random.default_rng(14).standard_normal((40, 8))
        assert error_subspace_alignment(x, 2.0 * x, k=3) == pytest.approx(
            1.0, abs=1e-9)

    def test_orthogonal_error_does_not(self):
        rng = np.random.default_rng(15)
        fp = np.zeros((50, 12))
        err = np.zeros((50, 12))
        fp[:, :5] = rng.standard_normal((50, 5))
        err[:, 5:10] = rng.standard_normal((50, 5))
        got = error_subspace_alignment(fp, fp + err, k=3)
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            error_subspace_alignment(np.ones((5, 3)), np.ones((5, 4)))


class TestProfilesOverTraces:
    def test_subspace_and_error_profiles(self):
        rng = np.random.default_rng(16)
        fp = synthetic_traces(rng, 40, layers=2)
        qq = [trace_with(residual_out=np.stack([
            tr.residual_out[0], 2.0 * tr.residual_out[1]])) for tr in fp]
        with pytest.warns(RuntimeWarning, match="spectral energy"):
            # k=3 of width-6 noise holds well under 90% of the mass
            sub = subspace_profile(fp, qq, position=-1, k=3)
        assert sub.means == pytest.approx([1.0, 1.0], abs=1e-9)
        assert list(sub.counts) == [40, 40]
        assert np.all(sub.extras["energy_fp"] > 0.0)
        err = error_alignment_profile(fp, qq, position=-1, k=3)
        assert err.means[0] == 0.0
        assert err.extras["error_frobenius"][0] == 0.0
        assert err.means[1] == pytest.approx(1.0, abs=1e-9)
        assert err.extras["error_frobenius"][1] > 0.0

    def test_low_energy_warns(self):
        rng = np.random.default_rng(17)
        fp = synthetic_traces(rng, 40, width=10)
        with pytest.warns(RuntimeWarning, match="spectral energy"):
            subspace_profile(fp, fp, position=-1, k=1)

    def test_activation_matrix_shape(self):
        fp = synthetic_traces(np.random.default_rng(18), 7, layers=3, width=6)
        m = activation_matrix(fp, "residual_out", layer=1, position=-1)
        assert m.shape == (7, 6)
        with pytest.raises(InvalidInput):
            activation_matrix(fp, "residual_out", layer=9, position=-1)


class TestLayerCurveExport:
    def test_rows_and_json(self):
        curve = LayerCurve(
            name="demo", means=np.array([0.5, 0.25]),
            stds=np.array([0.1, 0.0]), counts=np.array([4, 4]),
            position="-1", extras={"exclusion_rate": np.array([0.0, 1.0])})
        assert curve.rows() == [(0, 0.5, 0.1, 4), (1, 0.25, 0.0, 4)]
        doc = curve.to_json()
        assert doc["name"] == "demo"
        assert doc["exclusion_rate"] == [0.0, 1.0]
        assert curve.n_layers == 2


class TestCollectTraces:
    def test_matches_single_forward(self, small_model, small_world):
        from quantlens import model as qlm
        prompts = [corpus.render_prompt(small_world, f, t)[0]
                   for f, t in [(0, 0), (1, 1), (2, 0), (3, 1)]]
        traces = collect_traces(small_model, prompts,
                                sites={"residual_out", "attn_probs"})
        assert len(traces) == len(prompts)
        for ids, tr in zip(prompts, traces):
            ref_logits, ref = qlm.forward(small_model, ids,
                                          capture={"residual_out"})
            assert tr.logits.shape == ref_logits.shape
            assert np.allclose(tr.logits, ref_logits, atol=1e-4)
            assert np.allclose(tr.residual_out, ref.residual_out, atol=1e-4)
            assert tr.attn_probs.shape[-1] == len(ids)
        with pytest.raises(TraceIncomplete):
            value_cosine_profile(traces, traces, position=-1, site="ffn_out")

    def test_empty_prompts(self, small_model):
        with pytest.raises(InvalidInput):
            collect_traces(small_model, [], sites={"residual_out"})

    def test_self_profiles_are_clean(self, small_model, small_world):
        prompts = [corpus.render_prompt(small_world, f, 0)[0]
                   for f in range(8)]
        traces = collect_traces(
            small_model, prompts,
            sites={"ffn_out", "h_key", "gate_preact", "attn_probs"})
        pos = [corpus.render_prompt(small_world, f, 0)[1].last_subject
               for f in range(8)]
        cos = value_cosine_profile(traces, traces, position=pos)
        assert np.allclose(cos.means, 1.0)
        sfr = gate_sign_flip_rate(traces, traces, position=pos)
        assert np.allclose(sfr.means, 0.0)
        jac = expert_jaccard_profile(traces, traces, position=pos)
        assert np.allclose(jac.means, 1.0)
        jsd = attn_jsd_profile(traces, traces, position=pos)
        assert np.allclose(jsd.means, 0.0, atol=1e-12)
        ent = attn_entropy_profile(traces)
        assert np.all(ent.means >= 0.0) and np.all(ent.means <= 1.0 + 1e-9)
