"""Mask construction, sparse/dense equivalence, reachability, pair counts."""

import numpy as np
import pytest

from moediff import tensor as T
from moediff.attention import (
    AttentionMask,
    SparseAttentionConfig,
    build_window_mask,
    count_attended_pairs,
    dense_mask,
    masked_multihead_attention,
    reachability_span,
    receptive_field,
)
from moediff.errors import ConfigError, ShapeError

from oracles import bfs_reachable, dense_attention, finite_diff_grad


def cfg(w=2, d=1, globals_=(), heads=1, head_dim=4, layers=1):
    return SparseAttentionConfig(
        window_w=w,
        dilation_d=d,
        global_positions=frozenset(globals_),
        num_heads=heads,
        head_dim=head_dim,
        num_layers_l=layers,
    )


# ---------------------------------------------------------------------------
# masks


def test_window_w2_d1_neighbors_and_pair_count():
    # Brute-force enumeration of |i-j| <= 1 over 5 tokens gives 13 pairs.
    mask = build_window_mask(5, cfg(w=2, d=1))
    for i in range(5):
        expect = {j for j in range(5) if abs(i - j) <= 1}
        assert set(np.nonzero(mask.allowed[i])[0]) == expect
    assert mask.pair_count == 13


def test_dilated_window_strides():
    # w=2, d=2: token 2 attends positions within +-2 that differ by a
    # multiple of 2, i.e. {0, 2} inside a length-4 sequence.
    mask = build_window_mask(4, cfg(w=2, d=2))
    assert set(np.nonzero(mask.allowed[2])[0]) == {0, 2}


def test_global_token_has_full_row_and_column():
    mask = build_window_mask(9, cfg(w=2, d=1, globals_=(0,)))
    assert mask.allowed[0].all()
    assert mask.allowed[:, 0].all()


def test_mask_symmetric_without_globals():
    mask = build_window_mask(11, cfg(w=4, d=2))
    assert np.array_equal(mask.allowed, mask.allowed.T)


def test_mask_always_allows_diagonal():
    for w, d in [(2, 1), (4, 3), (8, 2)]:
        mask = build_window_mask(7, cfg(w=w, d=d))
        assert mask.allowed.diagonal().all()


def test_seq_len_one_is_self_mask():
    mask = build_window_mask(1, cfg(w=2))
    assert mask.allowed.shape == (1, 1) and mask.allowed[0, 0]


def test_pair_count_linear_bound():
    n, w, g = 64, 8, 1
    mask = build_window_mask(n, cfg(w=w, d=1, globals_=(3,)))
    assert mask.pair_count <= n * (w + 1) + 2 * n * g


def test_pair_count_dense_is_n_squared():
    assert count_attended_pairs(dense_mask(64)) == 64 * 64


def test_pair_count_at_most_doubles_when_n_doubles():
    # Without globals, pair_count(n) = n*(w+1) - D once n clears the window,
    # where D = d*(w/2)*(w/2+1) is the fixed boundary deficit; doubling n
    # therefore doubles the count up to that n-independent constant.
    for w, d in [(8, 1), (4, 2)]:
        deficit = d * (w // 2) * (w // 2 + 1)
        for n in (32, 64, 128):
            small = build_window_mask(n, cfg(w=w, d=d)).pair_count
            large = build_window_mask(2 * n, cfg(w=w, d=d)).pair_count
            assert small <= large <= 2 * small + deficit
            assert large == n * 2 * (w + 1) - deficit


def test_pair_count_cache_consistent():
    mask = build_window_mask(17, cfg(w=4, d=2, globals_=(5,)))
    assert mask.pair_count == int(mask.allowed.sum())


def test_odd_window_rejected():
    with pytest.raises(ConfigError):
        cfg(w=3)


def test_global_out_of_range_rejected():
    with pytest.raises(ConfigError):
        build_window_mask(4, cfg(w=2, globals_=(9,)))


def test_mask_requires_diagonal():
    bad = np.ones((3, 3), dtype=bool)
    bad[1, 1] = False
    with pytest.raises(ConfigError):
        AttentionMask(bad)


# ---------------------------------------------------------------------------
# receptive field and reachability


def test_receptive_field_formula():
    assert receptive_field(cfg(w=4, d=2, layers=3)) == 24
    assert receptive_field(cfg(w=2, d=1, layers=1)) == 2
    assert receptive_field(cfg(w=512, d=1, layers=12)) == 6144


def test_reachability_single_layer_equals_mask_rows():
    c = cfg(w=4, d=1, layers=1)
    mask = build_window_mask(20, c)
    assert np.array_equal(reachability_span(20, c), mask.allowed.sum(axis=1))


def test_reachability_center_token_w2_d1_l3():
    # BFS over the mask graph: 3 hops of +-1 reach 7 positions.
    c = cfg(w=2, d=1, layers=3)
    spans = reachability_span(100, c)
    assert spans[50] == 7
    reached = bfs_reachable(build_window_mask(100, c).allowed, 50, 3)
    assert len(reached) == 7
    assert reached == set(range(47, 54))


def test_reachability_center_token_w2_d2_l3():
    # Dilation 2 strides the reachable set: positions 50 +- {0,2,...,6}.
    c = cfg(w=2, d=2, layers=3)
    reached = bfs_reachable(build_window_mask(100, c).allowed, 50, 3)
    assert reached == {50 + k for k in range(-6, 7, 2)}
    assert reachability_span(100, c)[50] == len(reached)


def test_reachability_closed_forms_random_configs():
    rng = np.random.default_rng(4)
    for _ in range(10):
        l = int(rng.integers(1, 5))
        d = int(rng.integers(1, 4))
        w = 2 * int(rng.integers(1, 5))
        c = cfg(w=w, d=d, layers=l)
        seq_len = l * d * w + 15
        center = seq_len // 2
        reached = sorted(bfs_reachable(build_window_mask(seq_len, c).allowed, center, l))
        assert len(reached) == l * w + 1
        assert reached[-1] - reached[0] + 1 == l * d * w + 1
        assert reachability_span(seq_len, c)[center] == len(reached)


# ---------------------------------------------------------------------------
# masked multi-head attention


def test_full_mask_single_head_equals_dense_attention():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(6, 8)) for _ in range(3))
    out = masked_multihead_attention(q, k, v, dense_mask(6), num_heads=1)
    ref = dense_attention(q, k, v, np.ones((6, 6), dtype=bool), 1)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_seq_one_returns_value():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
    out = masked_multihead_attention(q, k, v, dense_mask(1), num_heads=2)
    assert np.allclose(out.data, v, atol=1e-15)


def test_sparse_matches_naive_dense_oracle():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(8, 8)) for _ in range(3))
    mask = build_window_mask(8, cfg(w=4, d=1))
    out = masked_multihead_attention(q, k, v, mask, num_heads=2)
    ref = dense_attention(q, k, v, mask.allowed, 2)
    assert np.max(np.abs(out.data - ref)) < 1e-10


def test_full_window_reduces_to_unmasked_dense():
    rng = np.random.default_rng(3)
    seq = 7
    q, k, v = (rng.normal(size=(seq, 6)) for _ in range(3))
    wide = build_window_mask(seq, cfg(w=2 * (seq - 1), d=1, head_dim=3, heads=2))
    assert wide.allowed.all()
    out = masked_multihead_attention(q, k, v, wide, num_heads=2)
    ref = dense_attention(q, k, v, np.ones((seq, seq), dtype=bool), 2)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_attention_batched_matches_per_sequence():
    rng = np.random.default_rng(8)
    q, k, v = (rng.normal(size=(3, 6, 8)) for _ in range(3))
    mask = build_window_mask(6, cfg(w=4))
    batched = masked_multihead_attention(q, k, v, mask, num_heads=2)
    for b in range(3):
        single = masked_multihead_attention(q[b], k[b], v[b], mask, num_heads=2)
        assert np.array_equal(batched.data[b], single.data)


def test_width_not_divisible_by_heads_rejected():
    z = np.zeros((4, 6))
    with pytest.raises(ShapeError):
        masked_multihead_attention(z, z, z, dense_mask(4), num_heads=4)


def test_gradient_blocked_on_masked_pairs():
    # d out_i / d v_j must be zero whenever mask[i, j] is false; checked by
    # finite differences on a value row outside the window.
    rng = np.random.default_rng(5)
    seq, width = 6, 4
    q, k = rng.normal(size=(seq, width)), rng.normal(size=(seq, width))
    v = rng.normal(size=(seq, width))
    mask = build_window_mask(seq, cfg(w=2, d=1))

    tape = T.GradTape()
    tv = T.Tensor(v, tape=tape)
    out = masked_multihead_attention(q, k, tv, mask, num_heads=2)
    # isolate output row 0; row 5 is far outside its window
    picked = T.tsum(T.mul(out, np.eye(seq)[0][:, None] * np.ones(width)))
    tape.backward(picked)
    assert np.array_equal(tv.grad[5], np.zeros(width))

    def value():
        out2 = masked_multihead_attention(q, k, T.Tensor(v), mask, num_heads=2)
        return float(out2.data[0].sum())

    num = finite_diff_grad(value, v)
    assert np.max(np.abs(num[5])) < 1e-9


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    seq, width = 5, 4
    arrays = {name: rng.normal(size=(seq, width)) for name in "qkv"}
    mask = build_window_mask(seq, cfg(w=4, d=1, globals_=(0,)))

    tape = T.GradTape()
    taped = {name: T.Tensor(arr, tape=tape) for name, arr in arrays.items()}
    out = masked_multihead_attention(taped["q"], taped["k"], taped["v"], mask, 2)
    tape.backward(T.tmean(T.mul(out, out)))

    def value():
        o = masked_multihead_attention(
            arrays["q"], arrays["k"], arrays["v"], mask, 2
        )
        return float((o.data * o.data).mean())

    for name in "qkv":
        num = finite_diff_grad(value, arrays[name])
        assert np.max(np.abs(taped[name].grad - num)) < 1e-8
