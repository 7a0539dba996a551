"""Token indexing, the fused time-view mask, masked attention and positional collapse."""

from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fourd import autodiff as ad
from fourd.attention import (
    GridIndex,
    build_mask,
    collapse_position,
    collapsed_coords,
    cross_half_edges,
    dense_oracle_attention,
    intra_pair_count,
    mask_density,
    mask_report,
    masked_attention,
    masked_attention_op,
    measured_density,
    read_pbm,
    write_pbm,
)
from fourd.errors import InputError

from fdcheck import central_difference, relative_error


def random_qkv(rng, n, d=8, heads=()):
    return tuple(rng.standard_normal(heads + (n, d)) for _ in range(3))


class TestGridIndex:
    def test_origin(self):
        assert GridIndex(2, 4, 3).flatten(0, 0, 0, 0) == 0

    def test_view_stride(self):
        assert GridIndex(2, 4, 3).flatten(1, 0, 0, 0) == 12

    def test_last_token(self):
        g = GridIndex(3, 4, 6, width=3)
        assert g.flatten(2, 3, 1, 2) == g.n_tokens - 1

    def test_out_of_range(self):
        g = GridIndex(2, 4, 3)
        with pytest.raises(InputError):
            g.flatten(2, 0, 0)
        with pytest.raises(InputError):
            g.unflatten(g.n_tokens)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(1, 4))
    def test_bijection(self, nv, nt, h, w):
        g = GridIndex(nv, nt, h * w, width=w)
        assert g.n_tokens <= 10_000
        coords = g.coords()
        assert np.array_equal([g.flatten(*c) for c in coords], np.arange(g.n_tokens))
        assert all(g.unflatten(i) == tuple(c) for i, c in enumerate(coords))


class TestBuildMask:
    def test_same_view(self):
        assert build_mask(4, 2).allowed(1, 0, 1, 3)

    def test_same_time(self):
        assert build_mask(4, 2).allowed(2, 1, 3, 1)

    def test_cross_half_to_reference(self):
        m = build_mask(4, 2)
        assert m.allowed(2, 0, 0, 2)
        # one way only
        assert not m.allowed(0, 2, 2, 0)

    def test_unrelated_pair(self):
        assert not build_mask(4, 2).allowed(2, 0, 3, 1)

    def test_diagonal_and_symmetry_of_shared_clauses(self):
        m = build_mask(5, 3)
        assert m.pair_mask.diagonal().all()
        T = 6
        v = np.repeat(np.arange(5), T)
        t = np.tile(np.arange(T), 5)
        shared = (v[:, None] == v[None, :]) | (t[:, None] == t[None, :])
        assert np.array_equal(m.pair_mask & shared, (m.pair_mask & shared).T)

    def test_cross_half_once_per_target_slot(self):
        m = build_mask(3, 2)
        T = 4
        for v, t in product(range(3), range(2)):
            row = m.pair_mask[v * T + t].reshape(3, T)
            assert row[0, t + 2]
        assert cross_half_edges(m) == 3 * 2

    def test_invalid_sizes(self):
        with pytest.raises(InputError):
            build_mask(0, 2)
        with pytest.raises(InputError):
            build_mask(2, 0)

    def test_token_mask_is_spatially_uniform(self):
        m = build_mask(3, 2)
        g = GridIndex(3, 4, 4, width=2)
        tok = m.token_mask(g)
        blocks = tok.reshape(12, 4, 12, 4)
        assert np.array_equal(blocks.min(axis=(1, 3)), blocks.max(axis=(1, 3)))
        assert np.array_equal(blocks[:, 0, :, 0], m.pair_mask)


class TestDensity:
    def test_six_views_two_frames(self):
        assert mask_density(6, 2) == Fraction(9, 24)
        assert float(mask_density(6, 2)) == 0.375

    @pytest.mark.parametrize("f", [1, 2, 5])
    def test_single_view(self, f):
        assert mask_density(1, f) == 1

    def test_brute_force_three_views(self):
        m = build_mask(3, 2)
        count = 0
        T = 4
        for (vi, ti), (vj, tj) in product(product(range(3), range(T)), repeat=2):
            count += (vi == vj) or (ti == tj)
        assert count == intra_pair_count(m)
        assert Fraction(count, (3 * T) ** 2) == mask_density(3, 2) == measured_density(m)

    def test_report_includes_both_densities(self):
        r = mask_report(build_mask(6, 2))
        assert r["formula_density"] == 0.375 == r["measured_density"]
        assert r["measured_density_with_cross_half"] > r["measured_density"]
        # the reference view's own cross-half edges coincide with the same-view clause
        assert r["cross_half_edges"] == 12

    def test_pbm_round_trip(self, tmp_path):
        m = build_mask(3, 3)
        write_pbm(tmp_path / "m.pbm", m.pair_mask)
        raw = (tmp_path / "m.pbm").read_bytes()
        assert raw.startswith(b"P4\n18 18\n")
        assert np.array_equal(read_pbm(tmp_path / "m.pbm"), m.pair_mask)


class TestMaskedAttention:
    def test_full_mask_is_plain_softmax(self):
        rng = np.random.default_rng(0)
        Q, K, V = random_qkv(rng, 8)
        m = build_mask(1, 1)
        out = masked_attention(Q, K, V, m, GridIndex(1, 2, 4))
        s = Q @ K.T / np.sqrt(8)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        assert np.allclose(out, (w / w.sum(axis=1, keepdims=True)) @ V, atol=1e-12)

    def test_identity_mask_returns_values(self):
        rng = np.random.default_rng(1)
        Q, K, V = random_qkv(rng, 6)
        assert np.allclose(dense_oracle_attention(Q, K, V, np.eye(6, dtype=bool)), V, atol=1e-12)

    def test_single_token(self):
        V = np.array([[1.0, -2.0, 3.0]])
        assert np.array_equal(dense_oracle_attention(V, V, V, [[True]]), V)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([(2, 2, 4), (3, 2, 9), (4, 3, 4), (1, 1, 1), (2, 1, 2)]), st.integers(0, 2**31))
    def test_matches_dense_oracle(self, shape, seed):
        nv, f, s = shape
        rng = np.random.default_rng(seed)
        m = build_mask(nv, f)
        g = GridIndex(nv, 2 * f, s)
        Q, K, V = random_qkv(rng, g.n_tokens, heads=(2,))
        diff = np.abs(masked_attention(Q, K, V, m, g) - dense_oracle_attention(Q, K, V, m.token_mask(g)))
        assert diff.max() < 1e-6

    def test_rows_sum_to_one_and_disallowed_weight_vanishes(self):
        rng = np.random.default_rng(2)
        m = build_mask(3, 2)
        g = GridIndex(3, 4, 2)
        n = g.n_tokens
        Q, K, _ = random_qkv(rng, n)
        # attention weights recovered by attending to one-hot values
        W = masked_attention(Q, K, np.eye(n), m, g)
        assert np.abs(W.sum(axis=1) - 1).max() < 1e-9
        assert W[~m.token_mask(g)].max() < 1e-12
        Wd = dense_oracle_attention(Q, K, np.eye(n), m.token_mask(g))
        assert Wd[~m.token_mask(g)].max() < 1e-12

    def test_permutation_equivariance_of_oracle(self):
        rng = np.random.default_rng(3)
        n = 10
        Q, K, V = random_qkv(rng, n)
        mask = rng.uniform(size=(n, n)) < 0.5
        np.fill_diagonal(mask, True)
        perm = rng.permutation(n)
        out = dense_oracle_attention(Q, K, V, mask)
        permuted = dense_oracle_attention(Q[perm], K[perm], V[perm], mask[np.ix_(perm, perm)])
        assert np.allclose(permuted, out[perm], atol=1e-12)

    def test_shape_mismatch(self):
        m = build_mask(2, 1)
        g = GridIndex(2, 2, 1)
        with pytest.raises(InputError):
            masked_attention(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 3)), m, g)
        with pytest.raises(InputError):
            masked_attention(np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 3)), m, g)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        m = build_mask(3, 2)
        g = GridIndex(3, 4, 3)
        Q, K, V = random_qkv(rng, g.n_tokens)
        assert np.array_equal(masked_attention(Q, K, V, m, g), masked_attention(Q, K, V, m, g))


class TestMaskedAttentionGradient:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(5)
        m = build_mask(2, 1)
        g = GridIndex(2, 2, 2)
        Q, K, V = random_qkv(rng, g.n_tokens, d=3)
        W = rng.standard_normal(Q.shape)
        return m, g, Q, K, V, W

    def test_matches_finite_differences(self, setup):
        m, g, Q, K, V, W = setup
        tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in (Q, K, V)]
        (masked_attention_op(*tensors, m, g) * W).sum().backward()
        for t in tensors:
            fd = central_difference(lambda: (masked_attention(*(u.data for u in tensors), m, g) * W).sum(), t.data, 1e-5)
            assert relative_error(t.grad, fd) < 1e-8

    def test_disallowed_key_has_no_influence(self, setup):
        m, g, Q, K, V, _ = setup
        # token 0 is (view 0, slot 0); token 7 is (view 1, slot 1), which shares neither view nor slot
        assert not m.allowed(0, 0, 1, 1)
        upstream = np.zeros(Q.shape)
        upstream[0, 0] = 1.0
        tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in (Q, K, V)]
        (masked_attention_op(*tensors, m, g) * upstream).sum().backward()
        assert np.abs(tensors[1].grad[7]).max() == 0.0 and np.abs(tensors[2].grad[7]).max() == 0.0
        K2, V2 = K.copy(), V.copy()
        K2[7] += 3.0
        V2[7] -= 2.0
        assert abs(masked_attention(Q, K2, V2, m, g)[0, 0] - masked_attention(Q, K, V, m, g)[0, 0]) < 1e-10


class TestCollapse:
    def test_view_zero(self):
        assert collapse_position(0, 3, 1, 2, 10) == (3, 1, 2)

    def test_formula(self):
        assert collapse_position(2, 1, 0, 5, 10).t_prime == 21

    def test_time_bound(self):
        with pytest.raises(InputError):
            collapse_position(0, 10, 0, 0, 10)

    def test_injective_on_grid(self):
        seen = {collapse_position(v, t, p, q, 4) for v, t, p, q in product(range(3), range(4), range(2), range(2))}
        assert len(seen) == 3 * 4 * 2 * 2
        assert max(c.t_prime for c in seen) < 3 * 4

    def test_grid_coordinates(self):
        g = GridIndex(3, 4, 6, width=3)
        c = collapsed_coords(g, 4)
        assert len({tuple(r) for r in c}) == g.n_tokens
        assert tuple(c[g.flatten(2, 1, 1, 2)]) == (9, 1, 2)
