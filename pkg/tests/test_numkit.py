"""Closed-form oracles and invariants for the numeric toolkit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quantlens import numkit
from quantlens.errors import DegenerateSample, InvalidInput, NumericalFailure


class TestEntropy:
    def test_dyadic_distribution_is_exact(self):
        # 0.5*1 + 0.25*2 + 0.25*2 bits
        assert numkit.shannon_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5, abs=1e-12)

    def test_uniform_hits_log2_n(self):
        for n in (2, 3, 16, 100):
            h = numkit.shannon_entropy(np.full(n, 1.0 / n))
            assert h == pytest.approx(np.log2(n), abs=1e-9)

    def test_point_mass_is_zero(self):
        assert numkit.shannon_entropy([1.0, 0.0, 0.0]) == 0.0

    def test_nats_mode(self):
        h = numkit.shannon_entropy([0.5, 0.5], base2=False)
        assert h == pytest.approx(np.log(2.0), abs=1e-12)

    def test_negative_entries_rejected(self):
        with pytest.raises(InvalidInput):
            numkit.shannon_entropy([1.1, -0.1])

    def test_bad_sum_rejected(self):
        with pytest.raises(InvalidInput):
            numkit.shannon_entropy([0.5, 0.4])

    @given(arrays(np.float64, st.integers(2, 50),
                  elements=st.floats(1e-6, 1.0)))
    def test_never_exceeds_log2_support(self, raw):
        p = raw / raw.sum()
        assert numkit.shannon_entropy(p) <= np.log2(p.size) + 1e-9


class TestJsd:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert numkit.jsd(p, p) == 0.0

    def test_disjoint_is_one(self):
        assert numkit.jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_known_value(self):
        # jsd([.5,.5],[1,0]): m=[.75,.25], H(m)=0.8112781..., H(p)=1, H(q)=0
        got = numkit.jsd([0.5, 0.5], [1.0, 0.0])
        want = -(0.75 * np.log2(0.75) + 0.25 * np.log2(0.25)) - 0.5
        assert got == pytest.approx(want, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInput):
            numkit.jsd([1.0], [0.5, 0.5])

    @given(arrays(np.float64, 8, elements=st.floats(1e-6, 1.0)),
           arrays(np.float64, 8, elements=st.floats(1e-6, 1.0)))
    def test_bounded_and_symmetric(self, a, b):
        p, q = a / a.sum(), b / b.sum()
        d1, d2 = numkit.jsd(p, q), numkit.jsd(q, p)
        assert 0.0 <= d1 <= 1.0
        assert d1 == pytest.approx(d2, abs=1e-9)


class TestCosine:
    def test_known_angle(self):
        got = numkit.cosine([1.0, 1.0], [1.0, 0.0])
        assert got == pytest.approx(0.7071067811865475, abs=1e-12)

    def test_self_is_one(self):
        v = np.array([3.0, -4.0, 1.0])
        assert numkit.cosine(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_near_zero_norm_flagged_as_zero(self):
        assert numkit.cosine([0.0, 1e-13], [1.0, 0.0]) == 0.0

    def test_opposite_is_minus_one(self):
        assert numkit.cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0, abs=1e-12)


class TestKurtosis:
    def test_two_point_symmetric_is_one(self):
        # +-1 alternating: m2 = 1, m4 = 1
        x = np.tile([1.0, -1.0], 50)
        assert numkit.kurtosis(x) == pytest.approx(1.0, abs=1e-12)

    def test_normal_sample_near_three(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(200_000)
        assert numkit.kurtosis(x) == pytest.approx(3.0, abs=0.1)

    def test_heavy_tail_exceeds_normal(self):
        rng = np.random.default_rng(7)
        x = rng.standard_t(df=5, size=200_000)
        assert numkit.kurtosis(x) > 3.5

    def test_short_input_rejected(self):
        with pytest.raises(InvalidInput):
            numkit.kurtosis([1.0, 2.0, 3.0])

    def test_constant_input_degenerate(self):
        with pytest.raises(DegenerateSample):
            numkit.kurtosis(np.full(10, 2.5))

    @given(arrays(np.float64, st.integers(8, 64),
                  elements=st.floats(-100, 100)))
    def test_pearson_kurtosis_at_least_one(self, x):
        # m4 >= m2^2 by Cauchy-Schwarz whenever variance is nonzero
        if np.var(x) > 1e-12:
            assert numkit.kurtosis(x) >= 1.0 - 1e-9


class TestJaccardTopFraction:
    def test_constructed_overlap(self):
        # len 100, fraction 0.05 -> k=5; top sets {0..4} and {2..6}: 3/7
        a = np.zeros(100)
        b = np.zeros(100)
        a[[0, 1, 2, 3, 4]] = [10, 9, 8, 7, 6]
        b[[2, 3, 4, 5, 6]] = [10, 9, 8, 7, 6]
        got = numkit.jaccard_top_fraction(a, b, 0.05)
        assert got == pytest.approx(3.0 / 7.0, abs=1e-12)

    def test_k_min_floor_applies(self):
        # fraction 0.01 of 100 would be k=1; floor lifts it to 4
        a = np.arange(100.0)
        idx = numkit.top_fraction_indices(a, 0.01)
        assert idx == frozenset({96, 97, 98, 99})

    def test_ties_break_toward_lower_index(self):
        a = np.ones(20)
        idx = numkit.top_fraction_indices(a, 0.2)
        assert idx == frozenset({0, 1, 2, 3})

    def test_random_sets_rarely_overlap(self):
        # At d=344, fraction 0.01 -> k=4; independent vectors should give
        # near-zero mean overlap.
        rng = np.random.default_rng(11)
        vals = [
            numkit.jaccard_top_fraction(rng.standard_normal(344),
                                        rng.standard_normal(344), 0.01)
            for _ in range(200)
        ]
        assert np.mean(vals) < 0.05

    @given(arrays(np.float64, 64, elements=st.floats(-10, 10)),
           arrays(np.float64, 64, elements=st.floats(-10, 10)))
    def test_symmetric_bounded_reflexive(self, a, b):
        j_ab = numkit.jaccard_top_fraction(a, b, 0.1)
        j_ba = numkit.jaccard_top_fraction(b, a, 0.1)
        assert j_ab == j_ba
        assert 0.0 <= j_ab <= 1.0
        assert numkit.jaccard_top_fraction(a, a, 0.1) == 1.0


class TestSvd:
    def test_reconstruction_relative_error(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((40, 24))
        r = numkit.svd(m)
        recon = r.u @ np.diag(r.s) @ r.v.T
        rel = np.linalg.norm(recon - m) / np.linalg.norm(m)
        assert rel <= 1e-6

    def test_singular_values_non_increasing(self):
        rng = np.random.default_rng(4)
        r = numkit.svd(rng.standard_normal((16, 16)))
        assert np.all(np.diff(r.s) <= 1e-12)

    def test_sign_convention(self):
        rng = np.random.default_rng(5)
        r = numkit.svd(rng.standard_normal((30, 12)))
        for j in range(r.v.shape[1]):
            col = r.v[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_sign_convention_is_stable_under_row_negation_of_u_source(self):
        # Same input twice gives bit-identical output.
        rng = np.random.default_rng(6)
        m = rng.standard_normal((20, 20))
        r1, r2 = numkit.svd(m), numkit.svd(m)
        assert np.array_equal(r1.u, r2.u)
        assert np.array_equal(r1.v, r2.v)

    def test_non_finite_rejected(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(InvalidInput):
            numkit.svd(m)

    @settings(max_examples=25)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2 ** 31 - 1))
    def test_reconstruction_property(self, rows, cols, seed):
        m = np.random.default_rng(seed).standard_normal((rows, cols))
        r = numkit.svd(m)
        recon = r.u @ np.diag(r.s) @ r.v.T
        assert np.allclose(recon, m, atol=1e-8)


class TestCholeskyInverse:
    def test_identity(self):
        got = numkit.cholesky_inverse(np.eye(8))
        assert np.allclose(got, np.eye(8), atol=1e-12)

    def test_random_spd_roundtrip(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((32, 32))
        h = a @ a.T + 32 * np.eye(32)
        inv = numkit.cholesky_inverse(h)
        assert np.allclose(h @ inv, np.eye(32), atol=1e-8)

    def test_indefinite_rejected(self):
        h = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(NumericalFailure):
            numkit.cholesky_inverse(h)

    def test_asymmetric_rejected(self):
        h = np.eye(4)
        h[0, 1] = 0.5
        with pytest.raises(InvalidInput):
            numkit.cholesky_inverse(h)
