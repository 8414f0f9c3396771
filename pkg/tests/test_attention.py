import tracemalloc

import numpy as np
import pytest

from aaconv import attention as att
from aaconv import autodiff as ad
from aaconv.errors import ContractError, ShapeError
from aaconv.gradcheck import check_gradients

import oracles


def rand(rng, shape, dtype=np.float32, scale=1.0):
    return (scale * rng.standard_normal(shape)).astype(dtype)


class TestSplitCombineHeads:
    def test_single_head_adds_axis(self):
        rng = np.random.default_rng(0)
        x = rand(rng, (2, 3, 4, 5))
        out = att.split_heads_2d(x, 1)
        assert out.shape == (2, 1, 3, 4, 5)
        np.testing.assert_array_equal(out[:, 0], x)

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        for heads in (1, 2, 4):
            x = rand(rng, (2, 3, 2, 8))
            back = att.combine_heads_2d(att.split_heads_2d(x, heads))
            assert np.array_equal(back, x)

    def test_channel_blocks_map_to_heads(self):
        x = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 1, 4)
        out = att.split_heads_2d(x, 2)
        np.testing.assert_array_equal(out[0, 0, 0, 0], [1.0, 2.0])
        np.testing.assert_array_equal(out[0, 1, 0, 0], [3.0, 4.0])

    def test_indivisible_channels(self):
        with pytest.raises(ShapeError):
            att.split_heads_2d(np.zeros((1, 1, 1, 5), dtype=np.float32), 2)


class TestRelToAbs:
    def test_single_element(self):
        x = np.array([[[[7.0]]]], dtype=np.float32)
        np.testing.assert_array_equal(att.rel_to_abs(x), x)

    def test_zeros(self):
        x = np.zeros((2, 3, 4, 7), dtype=np.float32)
        assert not att.rel_to_abs(x).any()

    def test_l2_example(self):
        x = np.array([[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]]], dtype=np.float32)
        out = att.rel_to_abs(x)
        np.testing.assert_array_equal(out[0, 0], [[2.0, 3.0], [4.0, 5.0]])

    @pytest.mark.parametrize("l", range(1, 9))
    def test_matches_index_map_exactly(self, l):
        rng = np.random.default_rng(l)
        x = rand(rng, (2, 2, l, 2 * l - 1))
        assert np.array_equal(att.rel_to_abs(x), oracles.rel_to_abs_index_map(x))

    def test_malformed_last_dim(self):
        with pytest.raises(ShapeError):
            att.rel_to_abs(np.zeros((1, 1, 3, 4), dtype=np.float32))

    def test_gradient_is_exact_adjoint(self):
        # Forward is vec(out) = P vec(in) for a 0/1 matrix P; the gradient
        # must therefore be P^T vec(g), i.e. scatter with zeros elsewhere.
        for l in range(1, 5):
            rng = np.random.default_rng(100 + l)
            m = 2 * l - 1
            perm = np.zeros((l * l, l * m))
            for i in range(l):
                for j in range(l):
                    perm[i * l + j, i * m + (j - i + l - 1)] = 1.0
            x = ad.Parameter("x", rand(rng, (1, 1, l, m), np.float64))
            tape = ad.Tape()
            out = att._rel_to_abs_v(tape.param(x))
            g = rng.standard_normal(out.value.shape)
            loss = ad.weighted_sum(out, g)
            ad.backward(tape, loss)
            want = (perm.T @ g.reshape(-1)).reshape(1, 1, l, m)
            np.testing.assert_array_equal(x.grad, want)


class TestRelativeLogits:
    def test_zero_queries_zero_logits(self):
        q = np.zeros((1, 2, 2, 3, 4), dtype=np.float32)
        rng = np.random.default_rng(2)
        out = att.relative_logits_1d(q, rand(rng, (5, 4)))
        assert not out.any()

    def test_height_one_reduces_to_rel_to_abs(self):
        rng = np.random.default_rng(3)
        b, heads, w, d = 2, 2, 4, 3
        q = rand(rng, (b, heads, 1, w, d))
        rel = rand(rng, (2 * w - 1, d))
        got = att.relative_logits_1d(q, rel)
        contraction = (q.reshape(-1, d) @ rel.T).reshape(b, heads, w, 2 * w - 1)
        want = att.rel_to_abs(contraction).reshape(b, heads, w, w)
        assert np.array_equal(got.reshape(b, heads, w, w), want)

    def test_2x3_matches_pair_oracle(self):
        rng = np.random.default_rng(4)
        q = rand(rng, (2, 2, 2, 3, 4))
        rel_h = rand(rng, (3, 4))
        rel_w = rand(rng, (5, 4))
        s_h, s_w = att.relative_logits_2d(q, rel_h, rel_w)
        want_h, want_w = oracles.relative_logits_pairs(q, rel_h, rel_w)
        np.testing.assert_allclose(s_h, want_h, atol=1e-5)
        np.testing.assert_allclose(s_w, want_w, atol=1e-5)

    def test_single_pixel(self):
        rng = np.random.default_rng(5)
        q = rand(rng, (1, 1, 1, 1, 4))
        rel_h = rand(rng, (1, 4))
        rel_w = rand(rng, (1, 4))
        s_h, s_w = att.relative_logits_2d(q, rel_h, rel_w)
        assert s_h.shape == s_w.shape == (1, 1, 1, 1)
        assert s_h[0, 0, 0, 0] == pytest.approx(q[0, 0, 0, 0] @ rel_h[0], abs=1e-6)
        assert s_w[0, 0, 0, 0] == pytest.approx(q[0, 0, 0, 0] @ rel_w[0], abs=1e-6)

    def test_oracle_equivalence_sweep_f32(self):
        rng = np.random.default_rng(6)
        for case in range(100):
            h, w = rng.integers(1, 7, size=2)
            heads = int(rng.choice([1, 2, 4]))
            d = int(rng.choice([2, 4]))
            q = rand(rng, (1, heads, h, w, d), scale=0.7)
            rel_h = rand(rng, (2 * h - 1, d), scale=0.7)
            rel_w = rand(rng, (2 * w - 1, d), scale=0.7)
            s_h, s_w = att.relative_logits_2d(q, rel_h, rel_w)
            want_h, want_w = att.naive_relative_logits(q, rel_h, rel_w)
            assert np.abs(s_h - want_h).max() <= 1e-5, f"case {case}"
            assert np.abs(s_w - want_w).max() <= 1e-5, f"case {case}"

    def test_oracle_equivalence_f64(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h, w = rng.integers(1, 7, size=2)
            q = rand(rng, (2, 2, h, w, 4), np.float64)
            rel_h = rand(rng, (2 * h - 1, 4), np.float64)
            rel_w = rand(rng, (2 * w - 1, 4), np.float64)
            s_h, s_w = att.relative_logits_2d(q, rel_h, rel_w)
            want_h, want_w = att.naive_relative_logits(q, rel_h, rel_w)
            assert np.abs(s_h - want_h).max() <= 1e-12
            assert np.abs(s_w - want_w).max() <= 1e-12

    def test_naive_matches_independent_pair_loops(self):
        rng = np.random.default_rng(8)
        q = rand(rng, (1, 2, 3, 2, 4))
        rel_h = rand(rng, (5, 4))
        rel_w = rand(rng, (3, 4))
        got = att.naive_relative_logits(q, rel_h, rel_w)
        want = oracles.relative_logits_pairs(q, rel_h, rel_w)
        np.testing.assert_allclose(got[0], want[0], atol=1e-6)
        np.testing.assert_allclose(got[1], want[1], atol=1e-6)

    def test_naive_size_cap(self):
        with pytest.raises(ContractError):
            att.naive_relative_logits(
                np.zeros((1, 1, 9, 2, 2), dtype=np.float32),
                np.zeros((17, 2), dtype=np.float32),
                np.zeros((3, 2), dtype=np.float32),
            )

    def test_offset_stationarity_exact(self):
        # identical query vectors -> the logit depends only on the offset
        rng = np.random.default_rng(9)
        h, w, d = 3, 4, 4
        qvec = rand(rng, (d,))
        q = np.broadcast_to(qvec, (1, 2, h, w, d)).copy()
        s_h, s_w = att.relative_logits_2d(q, rand(rng, (2 * h - 1, d)), rand(rng, (2 * w - 1, d)))
        for i in range(h * w):
            iy, ix = divmod(i, w)
            for j in range(h * w):
                jy, jx = divmod(j, w)
                ref_h = s_h[0, 0, (jy - iy) * w if jy >= iy else 0, 0]
                # compare against any other pair with the same offset
                for i2 in range(h * w):
                    i2y, i2x = divmod(i2, w)
                    j2y, j2x = i2y + (jy - iy), i2x + (jx - ix)
                    if 0 <= j2y < h and 0 <= j2x < w:
                        j2 = j2y * w + j2x
                        assert s_h[0, 0, i, j] == s_h[0, 0, i2, j2]
                        assert s_w[0, 0, i, j] == s_w[0, 0, i2, j2]

    def test_embedding_row_mismatch(self):
        q = np.zeros((1, 1, 2, 2, 4), dtype=np.float32)
        with pytest.raises(ShapeError):
            att.relative_logits_2d(q, np.zeros((3, 4), dtype=np.float32), np.zeros((7, 4), dtype=np.float32))

    def test_memory_stays_linear_in_positions(self):
        # a per-pair embedding table at this size would be 24*24 squared
        # times depth 64 doubles = 170 MB; the efficient path must stay
        # far below that even with every intermediate retained.
        h = w = 24
        d = 64
        rng = np.random.default_rng(10)
        q = rand(rng, (1, 1, h, w, d), np.float64)
        rel_h = rand(rng, (2 * h - 1, d), np.float64)
        rel_w = rand(rng, (2 * w - 1, d), np.float64)
        naive_table_bytes = (h * w) ** 2 * d * 8
        tracemalloc.start()
        att.relative_logits_2d(q, rel_h, rel_w)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert peak < naive_table_bytes / 4


def make_layer(rng, f_in, h, w, heads=2, d_k=4, d_v=4, encoding="relative", dtype=np.float32):
    spec = att.AttentionSpec(heads=heads, d_k=d_k, d_v=d_v, encoding=encoding)
    weights = att.init_attention_weights(spec, f_in, h, w, rng, dtype=dtype)
    return spec, weights


class TestSelfAttention2d:
    def test_single_pixel_weight_is_one(self):
        rng = np.random.default_rng(11)
        spec, weights = make_layer(rng, f_in=4, h=1, w=1)
        x = rand(rng, (2, 1, 1, 4))
        out, attn = att.attention_with_weights(x, spec, weights)
        np.testing.assert_array_equal(attn, np.ones_like(attn))
        kqv = x.reshape(2, 4) @ weights.w_qkv[0, 0]
        v = kqv[:, 2 * spec.d_k :]
        want = (v @ weights.w_out[0, 0]).reshape(2, 1, 1, spec.d_v)
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_matches_loop_oracle_relative(self):
        rng = np.random.default_rng(12)
        spec, weights = make_layer(rng, f_in=4, h=2, w=2)
        x = rand(rng, (1, 2, 2, 4))
        out = att.self_attention_2d(x, spec, weights)
        want = oracles.attention_loops(
            x, spec.heads, spec.d_k, spec.d_v,
            weights.w_qkv, weights.w_out, weights.rel_h, weights.rel_w,
        )
        assert np.abs(out - want).max() <= 1e-5

    def test_matches_loop_oracle_sweep(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            h, w = rng.integers(1, 5, size=2)
            heads = int(rng.choice([1, 2]))
            spec, weights = make_layer(rng, 3, h, w, heads=heads, d_k=4, d_v=4)
            x = rand(rng, (2, h, w, 3), scale=0.7)
            out = att.self_attention_2d(x, spec, weights)
            want = oracles.attention_loops(
                x, heads, 4, 4, weights.w_qkv, weights.w_out, weights.rel_h, weights.rel_w
            )
            assert np.abs(out - want).max() <= 1e-5

    def test_matches_loop_oracle_none_mode(self):
        rng = np.random.default_rng(14)
        spec, weights = make_layer(rng, 3, 3, 2, encoding="none")
        x = rand(rng, (2, 3, 2, 3))
        out = att.self_attention_2d(x, spec, weights)
        want = oracles.attention_loops(x, 2, 4, 4, weights.w_qkv, weights.w_out)
        assert np.abs(out - want).max() <= 1e-5

    @pytest.mark.parametrize("encoding", att.ENCODINGS)
    def test_rows_sum_to_one(self, encoding):
        rng = np.random.default_rng(15)
        spec, weights = make_layer(rng, 4, 3, 3, encoding=encoding)
        x = rand(rng, (2, 3, 3, 4))
        _, attn = att.attention_with_weights(x, spec, weights)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance_none_mode(self):
        rng = np.random.default_rng(16)
        spec, weights = make_layer(rng, 4, 3, 4, encoding="none")
        x = rand(rng, (2, 3, 4, 4))
        hw = 12
        for _ in range(20):
            perm = rng.permutation(hw)
            xp = x.reshape(2, hw, 4)[:, perm].reshape(2, 3, 4, 4)
            lhs = att.self_attention_2d(xp, spec, weights)
            rhs = att.self_attention_2d(x, spec, weights).reshape(2, hw, -1)[:, perm].reshape(2, 3, 4, -1)
            assert np.abs(lhs - rhs).max() <= 1e-5

    def test_permutation_sensitivity_relative_mode(self):
        rng = np.random.default_rng(17)
        spec, weights = make_layer(rng, 4, 3, 3)
        x = rand(rng, (1, 3, 3, 4))
        hw = 9
        perm = np.arange(hw)
        perm[0], perm[5] = perm[5], perm[0]  # one transposition
        xp = x.reshape(1, hw, 4)[:, perm].reshape(1, 3, 3, 4)
        lhs = att.self_attention_2d(xp, spec, weights)
        rhs = att.self_attention_2d(x, spec, weights).reshape(1, hw, -1)[:, perm].reshape(1, 3, 3, -1)
        assert np.abs(lhs - rhs).max() > 1e-3

    def test_channel_mismatch(self):
        rng = np.random.default_rng(18)
        spec, weights = make_layer(rng, 4, 2, 2)
        with pytest.raises(ShapeError):
            att.self_attention_2d(np.zeros((1, 2, 2, 5), dtype=np.float32), spec, weights)

    def test_spec_validation(self):
        with pytest.raises(ContractError):
            att.AttentionSpec(heads=3, d_k=4, d_v=4)
        with pytest.raises(ContractError):
            att.AttentionSpec(heads=2, d_k=4, d_v=4, min_head_depth=20)
        with pytest.raises(ContractError):
            att.AttentionSpec(heads=2, d_k=4, d_v=4, encoding="fourier")

    def test_coord_mode_widens_projection(self):
        rng = np.random.default_rng(19)
        spec, weights = make_layer(rng, 4, 3, 3, encoding="coord")
        assert weights.w_qkv.shape[2] == 7
        x = rand(rng, (1, 3, 3, 4))
        out = att.self_attention_2d(x, spec, weights)
        assert out.shape == (1, 3, 3, 4)


class TestEncodings:
    def test_sine_origin_values(self):
        enc = att.sine_encoding_2d(3, 3, 8)
        d = 8
        np.testing.assert_allclose(enc[0, 0, 0 : d // 2 : 2], 0.0)
        np.testing.assert_allclose(enc[0, 0, 1 : d // 2 : 2], 1.0)

    def test_sine_x_half_depends_only_on_x(self):
        enc = att.sine_encoding_2d(4, 3, 8)
        np.testing.assert_array_equal(enc[0, 1, :4], enc[3, 1, :4])
        np.testing.assert_array_equal(enc[1, 0, 4:], enc[1, 2, 4:])

    def test_sine_matches_direct_formula(self):
        h, w, d = 2, 2, 8
        enc = att.sine_encoding_2d(h, w, d, dtype=np.float64)
        pairs = d // 4
        for y in range(h):
            for x in range(w):
                for i in range(pairs):
                    div = 10000.0 ** (i / pairs)
                    assert enc[y, x, 2 * i] == pytest.approx(np.sin(x / div))
                    assert enc[y, x, 2 * i + 1] == pytest.approx(np.cos(x / div))
                    assert enc[y, x, d // 2 + 2 * i] == pytest.approx(np.sin(y / div))
                    assert enc[y, x, d // 2 + 2 * i + 1] == pytest.approx(np.cos(y / div))

    def test_sine_depth_divisibility(self):
        with pytest.raises(ContractError):
            att.sine_encoding_2d(2, 2, 6)

    def test_coord_center_of_odd_map(self):
        c = att.coord_channels(5, 5)
        np.testing.assert_allclose(c[2, 2], [0.0, 0.0, 0.0])

    def test_coord_corner(self):
        c = att.coord_channels(4, 7)
        np.testing.assert_allclose(c[0, 0], [-1.0, -1.0, np.sqrt(2.0)], atol=1e-6)

    def test_coord_full_formula(self):
        c = att.coord_channels(3, 3, dtype=np.float64)
        for y in range(3):
            for x in range(3):
                xs, ys = x - 1.0, y - 1.0
                np.testing.assert_allclose(c[y, x], [xs, ys, np.hypot(xs, ys)])

    def test_coord_single_row_maps_to_zero(self):
        c = att.coord_channels(1, 3)
        np.testing.assert_allclose(c[0, :, 1], 0.0)


class TestAttentionGradients:
    def test_full_layer_gradcheck_relative(self):
        rng = np.random.default_rng(20)
        spec = att.AttentionSpec(heads=2, d_k=4, d_v=4)
        weights = att.init_attention_weights(spec, 4, 3, 3, rng, dtype=np.float64)
        params = [
            ad.Parameter("w_qkv", weights.w_qkv),
            ad.Parameter("w_out", weights.w_out),
            ad.Parameter("rel_h", weights.rel_h),
            ad.Parameter("rel_w", weights.rel_w),
            ad.Parameter("x", rng.standard_normal((1, 3, 3, 4))),
        ]
        probe = rng.standard_normal((1, 3, 3, 4))

        def build():
            tape = ad.Tape()
            wv = att.AttentionVars(*(tape.param(p) for p in params[:4]))
            out, _ = att.multi_head_attention_v(tape.param(params[4]), spec, wv)
            return ad.weighted_sum(out, probe)

        report = check_gradients(build, params, h=1e-5)
        assert report.max_rel_err < 1e-4, report.worst()

    def test_relative_logits_gradcheck(self):
        rng = np.random.default_rng(21)
        q = ad.Parameter("q", rng.standard_normal((1, 2, 2, 3, 4)))
        rel_h = ad.Parameter("rel_h", rng.standard_normal((3, 4)))
        rel_w = ad.Parameter("rel_w", rng.standard_normal((5, 4)))
        probe_h = rng.standard_normal((1, 2, 6, 6))
        probe_w = rng.standard_normal((1, 2, 6, 6))

        def build():
            tape = ad.Tape()
            s_h, s_w = att._relative_logits_2d_v(
                tape.param(q), tape.param(rel_h), tape.param(rel_w)
            )
            return ad.add(ad.weighted_sum(s_h, probe_h), ad.weighted_sum(s_w, probe_w))

        report = check_gradients(build, [q, rel_h, rel_w], h=1e-5)
        assert report.max_rel_err < 1e-4
