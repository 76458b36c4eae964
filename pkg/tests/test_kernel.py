import numpy as np
import pytest

from tila import (
    KvState,
    batched_backward,
    batched_forward,
    block_decay,
    chunked_forward,
    finite_diff_grads,
    oracle_backward,
    oracle_forward,
    random_matrix,
    recurrent_forward,
    tiled_backward,
    tiled_forward,
)


def rel_err(candidate, reference):
    return np.max(np.abs(candidate - reference)) / max(np.max(np.abs(reference)), 1e-12)


def seeded(n, d, dv, base, precision="double"):
    q = random_matrix(n, d, base + 0, precision)
    k = random_matrix(n, d, base + 1, precision)
    v = random_matrix(n, dv, base + 2, precision)
    return q, k, v


class TestBlockDecay:
    def test_half_decay(self):
        bd = block_decay(3, 0.5)
        assert bd.lambda_powers.tolist() == [0.5, 0.25, 0.125]
        assert bd.complement_powers.tolist() == [0.25, 0.5, 1.0]

    def test_single_row_block(self):
        bd = block_decay(1, 0.7)
        assert bd.lambda_powers.tolist() == [0.7]
        assert bd.complement_powers.tolist() == [1.0]

    def test_lam_one(self):
        bd = block_decay(4, 1.0)
        assert bd.lambda_powers.tolist() == [1.0] * 4
        assert bd.complement_powers.tolist() == [1.0] * 4

    def test_endpoints(self):
        bd = block_decay(9, 0.83)
        assert bd.lambda_powers[0] == 0.83
        assert bd.complement_powers[-1] == 1.0

    @pytest.mark.parametrize("lam", [0.25, 0.5, 1.0])
    def test_product_invariant_exact_for_dyadic(self, lam):
        bd = block_decay(12, lam)
        prod = bd.lambda_powers * bd.complement_powers
        assert np.all(prod == lam ** 12)

    @pytest.mark.parametrize("lam", [0.9, 0.999, 0.37])
    def test_product_invariant_shared_table(self, lam):
        # generic rates agree to a rounding of the shared power table
        bd = block_decay(12, lam)
        prod = bd.lambda_powers * bd.complement_powers
        np.testing.assert_allclose(prod, bd.lambda_powers[-1], rtol=5e-15)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            block_decay(0, 0.5)
        with pytest.raises(ValueError):
            block_decay(3, 1.5)


class TestTiledForward:
    def test_single_block_equals_oracle_exactly(self):
        q, k, v = seeded(12, 4, 4, base=10)
        expected = oracle_forward(q, k, v, 0.9)
        for block in (12, 13, 50):
            res = tiled_forward(q, k, v, 0.9, block)
            assert np.array_equal(res.o, expected)

    def test_two_blocks_hand_value(self):
        ones = [[1.0], [1.0]]
        res = tiled_forward(ones, ones, ones, 0.5, 1)
        assert res.o.ravel().tolist() == [1.0, 1.5]

    def test_seeded_against_oracle(self):
        q, k, v = seeded(64, 8, 8, base=20)
        expected = oracle_forward(q, k, v, 0.9)
        assert rel_err(tiled_forward(q, k, v, 0.9, 16).o, expected) <= 1e-11

    @pytest.mark.parametrize("lam", [0.5, 0.9, 0.999, 1.0])
    @pytest.mark.parametrize("block", [1, 2, 3, 8, 16, 33, 38])
    def test_block_grid_against_oracle(self, block, lam):
        q, k, v = seeded(33, 5, 8, base=30)
        expected = oracle_forward(q, k, v, lam)
        assert rel_err(tiled_forward(q, k, v, lam, block).o, expected) <= 1e-10

    @pytest.mark.parametrize("blocks", [(1, 16), (4, 64), (7, 10), (16, 100)])
    def test_block_size_invariance(self, blocks):
        q, k, v = seeded(50, 6, 9, base=40)
        a = tiled_forward(q, k, v, 0.95, blocks[0]).o
        b = tiled_forward(q, k, v, 0.95, blocks[1]).o
        assert rel_err(a, b) <= 1e-10

    def test_partial_final_block_state(self):
        # n not divisible by block: the carried state must still absorb all rows
        q, k, v = seeded(10, 3, 3, base=55)
        res = tiled_forward(q, k, v, 0.8, 4)
        _, ref_state = recurrent_forward(q, k, v, 0.8)
        assert res.final_kv.tokens_absorbed == 10
        assert rel_err(res.final_kv.kv, ref_state.kv) <= 1e-12

    def test_value_width_differs(self):
        q, k, v = seeded(21, 4, 7, base=60)
        expected = oracle_forward(q, k, v, 0.9)
        assert rel_err(tiled_forward(q, k, v, 0.9, 5).o, expected) <= 1e-10

    def test_inputs_not_mutated(self):
        q, k, v = seeded(17, 4, 4, base=70)
        snapshots = [a.copy() for a in (q, k, v)]
        tiled_forward(q, k, v, 0.9, 5)
        for a, snap in zip((q, k, v), snapshots):
            assert np.array_equal(a, snap)

    def test_repeat_calls_identical(self):
        q, k, v = seeded(23, 4, 4, base=80)
        a = tiled_forward(q, k, v, 0.9, 6).o
        b = tiled_forward(q, k, v, 0.9, 6).o
        assert np.array_equal(a, b)

    def test_single_precision_path(self):
        q, k, v = seeded(32, 8, 8, base=90, precision="single")
        res = tiled_forward(q, k, v, 0.9, 8)
        assert res.o.dtype == np.float32
        expected = oracle_forward(q.astype(np.float64), k.astype(np.float64),
                                  v.astype(np.float64), 0.9)
        assert rel_err(res.o.astype(np.float64), expected) <= 1e-4


class TestTiledBackward:
    def test_single_block_equals_oracle_exactly(self):
        q, k, v = seeded(9, 3, 3, base=100)
        d_out = random_matrix(9, 3, 103)
        expected = oracle_backward(q, k, v, d_out, 0.9)
        got = tiled_backward(q, k, v, d_out, 0.9, 9)
        assert np.array_equal(got.dq, expected.dq)
        assert np.array_equal(got.dk, expected.dk)
        assert np.array_equal(got.dv, expected.dv)

    def test_two_blocks_hand_values(self):
        ones = [[1.0], [1.0]]
        g = tiled_backward(ones, ones, ones, ones, 0.5, 1)
        assert g.dq.ravel().tolist() == [1.0, 1.5]
        assert g.dk.ravel().tolist() == [1.5, 1.0]
        assert g.dv.ravel().tolist() == [1.5, 1.0]

    def test_seeded_against_oracle_and_fdiff(self):
        q, k, v = seeded(96, 16, 16, base=110)
        d_out = random_matrix(96, 16, 113)
        expected = oracle_backward(q, k, v, d_out, 0.85)
        got = tiled_backward(q, k, v, d_out, 0.85, 32)
        for name in ("dq", "dk", "dv"):
            assert rel_err(getattr(got, name), getattr(expected, name)) <= 1e-11

        small = [a[:12, :4].copy() for a in (q, k, v, d_out)]
        fd = finite_diff_grads(*small, 0.85)
        got_small = tiled_backward(*small, 0.85, 5)
        for name in ("dq", "dk", "dv"):
            assert rel_err(getattr(got_small, name), getattr(fd, name)) <= 1e-6

    @pytest.mark.parametrize("lam", [0.5, 0.9, 1.0])
    @pytest.mark.parametrize("block", [1, 3, 8, 20, 64])
    def test_block_grid_against_oracle(self, block, lam):
        q, k, v = seeded(20, 4, 6, base=120)
        d_out = random_matrix(20, 6, 123)
        expected = oracle_backward(q, k, v, d_out, lam)
        got = tiled_backward(q, k, v, d_out, lam, block)
        for name in ("dq", "dk", "dv"):
            assert rel_err(getattr(got, name), getattr(expected, name)) <= 1e-10

    def test_inputs_not_mutated(self):
        q, k, v = seeded(15, 4, 4, base=130)
        d_out = random_matrix(15, 4, 133)
        snapshots = [a.copy() for a in (q, k, v, d_out)]
        tiled_backward(q, k, v, d_out, 0.9, 4)
        for a, snap in zip((q, k, v, d_out), snapshots):
            assert np.array_equal(a, snap)


class TestChunkedForward:
    def test_aligned_chunks_bitwise_equal_to_tiled(self):
        q, k, v = seeded(60, 5, 5, base=140)
        block = 10
        whole = tiled_forward(q, k, v, 0.9, block)
        state = KvState.fresh(5, 5)
        o1, state = chunked_forward(q[:30], k[:30], v[:30], 0.9, block, state)
        o2, state = chunked_forward(q[30:], k[30:], v[30:], 0.9, block, state)
        assert np.array_equal(np.concatenate([o1, o2]), whole.o)
        assert np.array_equal(state.kv, whole.final_kv.kv)
        assert state.tokens_absorbed == 60

    def test_fresh_state_single_chunk_equals_tiled(self):
        q, k, v = seeded(27, 4, 6, base=150)
        whole = tiled_forward(q, k, v, 0.8, 8)
        o, state = chunked_forward(q, k, v, 0.8, 8, KvState.fresh(4, 6))
        assert np.array_equal(o, whole.o)
        assert np.array_equal(state.kv, whole.final_kv.kv)

    def test_ragged_chunks_match_recurrent(self):
        q, k, v = seeded(100, 8, 8, base=160)
        expected, ref_state = recurrent_forward(q, k, v, 0.9)
        state = KvState.fresh(8, 8)
        outs, start = [], 0
        for length in (7, 13, 1, 29, 17, 23, 10):
            stop = start + length
            o, state = chunked_forward(q[start:stop], k[start:stop], v[start:stop], 0.9, 16, state)
            outs.append(o)
            start = stop
        assert start == 100
        assert rel_err(np.concatenate(outs), expected) <= 1e-11
        assert rel_err(state.kv, ref_state.kv) <= 1e-11
        assert state.tokens_absorbed == 100

    def test_state_dimension_mismatch(self):
        q, k, v = seeded(8, 4, 4, base=170)
        with pytest.raises(ValueError):
            chunked_forward(q, k, v, 0.9, 4, KvState.fresh(3, 4))

    def test_caller_state_not_mutated(self):
        q, k, v = seeded(8, 4, 4, base=180)
        state = KvState.fresh(4, 4)
        before = state.kv.copy()
        chunked_forward(q, k, v, 0.9, 4, state)
        assert np.array_equal(state.kv, before)
        assert state.tokens_absorbed == 0


class TestBatched:
    def test_single_head_identical(self):
        q, k, v = seeded(24, 4, 4, base=190)
        single = tiled_forward(q, k, v, 0.9, 8)
        [batched] = batched_forward([(q, k, v, 0.9)], 8)
        assert np.array_equal(batched.o, single.o)

    def test_per_head_decay_rates(self):
        heads = []
        for i, lam in enumerate((0.6, 0.8, 0.9, 0.99)):
            q, k, v = seeded(20, 4, 4, base=200 + 10 * i)
            heads.append((q, k, v, lam))
        results = batched_forward(heads, 8)
        for (q, k, v, lam), res in zip(heads, results):
            assert np.array_equal(res.o, tiled_forward(q, k, v, lam, 8).o)

    def test_duplicated_heads_identical(self):
        q, k, v = seeded(16, 4, 4, base=210)
        a, b = batched_forward([(q, k, v, 0.9), (q, k, v, 0.9)], 4)
        assert np.array_equal(a.o, b.o)

    def test_parallel_matches_sequential(self):
        heads = []
        for i in range(4):
            q, k, v = seeded(32, 4, 4, base=220 + 10 * i)
            heads.append((q, k, v, 0.9))
        seq = batched_forward(heads, 8, parallel=False)
        par = batched_forward(heads, 8, parallel=True)
        for a, b in zip(seq, par):
            assert np.array_equal(a.o, b.o)

    def test_error_carries_head_index(self):
        good = seeded(8, 4, 4, base=230)
        bad = (np.ones((8, 4)), np.ones((8, 5)), np.ones((8, 4)))
        with pytest.raises(ValueError, match="head 1"):
            batched_forward([(*good, 0.9), (*bad, 0.9)], 4)

    def test_batched_backward_matches_single(self):
        q, k, v = seeded(18, 4, 5, base=240)
        d_out = random_matrix(18, 5, 243)
        single = tiled_backward(q, k, v, d_out, 0.9, 6)
        [batched] = batched_backward([(q, k, v, d_out, 0.9)], 6)
        for name in ("dq", "dk", "dv"):
            assert np.array_equal(getattr(batched, name), getattr(single, name))
