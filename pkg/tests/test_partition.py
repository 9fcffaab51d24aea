import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from shatterlab.partition import (
    PartitionSpec,
    bernstein_basis,
    bucket_index,
    build_mask,
    clear_cache,
    eval_parts,
    hard_bucket_parts,
    layer_schedule,
    partition_table,
    t5_boundaries,
    u_transform,
)

# 40-digit evaluations of the closed forms
U_ALPHA2_BETA1_X1 = 0.3954597728840436575400839808566374530225
BETA_K0_L12_D5 = -0.1859283972239759322825170173469231662528
PARTS_X5_N12_LAST = [
    0.64968640890365344488,
    0.29262586910104372633,
    0.052720757641608498485,
    0.0047492012494381809158,
    0.00021390922206573427183,
    3.8538821904151212209e-6,
]


class TestBernstein:
    def test_linear(self):
        np.testing.assert_allclose(bernstein_basis(1, 0.25), [0.75, 0.25])

    def test_quadratic_midpoint(self):
        np.testing.assert_allclose(bernstein_basis(2, 0.5), [0.25, 0.5, 0.25])

    def test_degree_zero(self):
        np.testing.assert_array_equal(bernstein_basis(0, [0.0, 0.3, 1.0]), [[1.0], [1.0], [1.0]])

    def test_negative_degree(self):
        with pytest.raises(ValueError):
            bernstein_basis(-1, 0.5)

    @given(st.integers(0, 16), st.floats(0, 1))
    def test_partition_of_unity(self, degree, u):
        b = bernstein_basis(degree, u)
        assert np.all(b >= 0)
        assert abs(b.sum() - 1.0) < 1e-12


class TestUTransform:
    def test_zero(self):
        assert u_transform(0.0, -2.0, -1.0) == pytest.approx(0.0, abs=1e-15)

    def test_limit(self):
        assert abs(u_transform(1e6, -2.0, -1.0) - 1.0) < 1e-9

    def test_closed_form_value(self):
        assert u_transform(1.0, -2.0, -1.0) == pytest.approx(U_ALPHA2_BETA1_X1, rel=1e-14)

    @pytest.mark.parametrize("alpha,beta", [(0.0, -1.0), (-1.0, 0.0), (1.0, -1.0)])
    def test_rejects_nonnegative(self, alpha, beta):
        with pytest.raises(ValueError):
            u_transform(1.0, alpha, beta)

    @given(st.floats(-30, -1e-3), st.floats(-5, -1e-3))
    def test_monotone_and_bounded(self, alpha, beta):
        u = u_transform(np.arange(0, 600, 3.0), alpha, beta)
        assert np.all((u >= 0) & (u <= 1))
        assert np.all(np.diff(u) >= -1e-12)

    def test_huge_argument_stays_finite(self):
        assert np.isfinite(u_transform(1e300, -40.0, -1.0))


class TestSchedule:
    def test_last_layer(self):
        assert layer_schedule(11, 12, 5) == pytest.approx((-5.0, -1.0 / 12))

    def test_first_layer_value(self):
        a, b = layer_schedule(0, 12, 5)
        assert a == pytest.approx(-5 / 12)
        assert b == pytest.approx(BETA_K0_L12_D5, rel=1e-14)

    def test_alpha_strictly_decreasing(self):
        alphas = [layer_schedule(k, 12, 5)[0] for k in range(12)]
        assert all(x > y for x, y in zip(alphas, alphas[1:]))

    def test_degenerate_degree(self, caplog):
        assert layer_schedule(1, 4, 0) == (-0.5, -1.0)
        with caplog.at_level(logging.INFO):
            spec = PartitionSpec(2, 4)
        assert spec.betas == (-1.0,) * 4
        assert "degenerate" in caplog.text

    def test_index_range(self):
        with pytest.raises(ValueError):
            layer_schedule(3, 3, 1)


class TestSpec:
    @pytest.mark.parametrize("parts", [0, 3, 5])
    def test_rejects_bad_parts(self, parts):
        with pytest.raises(ValueError):
            PartitionSpec(parts, 2)

    def test_rejects_positive_override(self):
        with pytest.raises(ValueError):
            PartitionSpec(4, 2, alphas=(-1.0, 1.0), betas=(-1.0, -1.0))

    def test_rejects_wrong_override_length(self):
        with pytest.raises(ValueError):
            PartitionSpec(4, 2, alphas=(-1.0,), betas=(-1.0,))

    def test_key_tracks_schedule(self):
        a = PartitionSpec(4, 2)
        b = PartitionSpec(4, 2, alphas=(-1.0, -2.0), betas=(-0.5, -0.5))
        assert a.key() == PartitionSpec(4, 2).key() != b.key()


class TestEvalParts:
    def test_origin(self):
        w = eval_parts(0, 0, PartitionSpec(8, 3))
        np.testing.assert_array_equal(w, [1, 0, 0, 0, 0, 0, 0, 0])

    def test_mirror(self):
        spec = PartitionSpec(8, 3)
        x = np.arange(1, 40)
        right, left = eval_parts(x, 1, spec), eval_parts(-x, 1, spec)
        np.testing.assert_allclose(left[:, 4:], right[:, :4], atol=0)
        assert np.all(left[:, :4] == 0) and np.all(right[:, 4:] == 0)

    def test_closed_form_x5_n12_last_layer(self):
        w = eval_parts(5, 11, PartitionSpec(12, 12))
        np.testing.assert_allclose(w[:6], PARTS_X5_N12_LAST, rtol=1e-12, atol=1e-18)
        np.testing.assert_array_equal(w[6:], 0.0)

    @pytest.mark.parametrize("parts", [2, 4, 8, 12, 16])
    def test_matches_scalar_oracle(self, parts):
        L = 3
        spec = PartitionSpec(parts, L)
        xs = np.arange(-70, 71, 7)
        for k in range(L):
            alpha, beta = oracles.schedule(k, L, parts)
            got = eval_parts(xs, k, spec)
            want = [[oracles.part_weight(int(x), h, parts, alpha, beta) for h in range(parts)] for x in xs]
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-14)

    @given(st.sampled_from([2, 4, 8, 12, 16]), st.integers(1, 12), st.data())
    def test_unity(self, parts, num_layers, data):
        k = data.draw(st.integers(0, num_layers - 1))
        w = eval_parts(np.arange(-511, 512), k, PartitionSpec(parts, num_layers))
        assert np.all((w >= 0) & (w <= 1))
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


class TestMask:
    def test_shape_shift_and_unity(self):
        m = build_mask(9, 1, PartitionSpec(4, 2))
        v = m.values
        assert v.shape == (4, 9, 9) and m.length == 9
        np.testing.assert_array_equal(v[:, 1:, 1:], v[:, :-1, :-1])
        np.testing.assert_allclose(v.sum(0), 1.0, atol=1e-9)

    def test_single_position(self):
        v = build_mask(1, 0, PartitionSpec(6, 2)).values
        assert v.shape == (6, 1, 1) and v[0, 0, 0] == 1.0 and v[1:].sum() == 0.0

    def test_matches_oracle(self):
        spec = PartitionSpec(4, 2)
        alpha, beta = oracles.schedule(0, 2, 4)
        np.testing.assert_allclose(build_mask(6, 0, spec).values, oracles.mask(4, 6, alpha, beta), atol=1e-14)

    def test_cached_and_read_only(self):
        clear_cache()
        spec = PartitionSpec(4, 2)
        a, b = build_mask(7, 0, spec), build_mask(7, 0, spec)
        assert a.values is b.values
        with pytest.raises(ValueError):
            a.values[0, 0, 0] = 2.0

    def test_bad_length(self):
        with pytest.raises(ValueError):
            build_mask(0, 0, PartitionSpec(4, 2))


class TestBuckets:
    B = (-np.inf, -2, 0, 2, np.inf)

    def test_examples(self):
        np.testing.assert_array_equal(hard_bucket_parts(self.B, -3), [1, 0, 0, 0])
        np.testing.assert_array_equal(hard_bucket_parts(self.B, 0), [0, 0, 1, 0])
        for g, edge in enumerate(self.B[1:-1], start=1):
            assert bucket_index(self.B, edge) == g

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            hard_bucket_parts([0, 0, 1], 0)

    @given(st.integers(-1000, 1000))
    def test_one_hot(self, x):
        w = hard_bucket_parts(self.B, x)
        assert w.sum() == 1.0

    def test_t5_boundaries_reproduce_reference_bucketing(self):
        b = t5_boundaries(32, 128)
        assert len(b) - 1 == 31
        xs = np.arange(-400, 401)
        ours = bucket_index(b, xs)
        ref = np.array([oracles.t5_bucket(int(x)) for x in xs])
        # same equivalence classes, and ours are ordered along x
        pairs = set(zip(ours.tolist(), ref.tolist()))
        assert len(pairs) == len(set(ours.tolist())) == len(set(ref.tolist())) == 31
        assert np.all(np.diff(ours) >= 0)


def test_partition_table_rows_and_sums():
    spec = PartitionSpec(4, 3)
    rows = partition_table(spec, radius=64)
    assert len(rows) == 3 * 4 * 129
    sums = {}
    for layer, _, x, w in rows:
        sums[(layer, x)] = sums.get((layer, x), 0.0) + w
    assert max(abs(s - 1.0) for s in sums.values()) < 1e-9


def test_last_layer_curves_single_peaked():
    spec = PartitionSpec(4, 2)
    x = np.arange(0, 65)
    w = eval_parts(x, 1, spec)
    for h in range(2):
        d = np.sign(np.diff(w[:, h]))
        d = d[d != 0]
        assert np.count_nonzero(np.diff(d)) <= 1
