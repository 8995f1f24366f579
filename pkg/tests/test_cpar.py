import numpy as np
import pytest

from zayasim.cpar import (ConvParams, causal_attention, causal_attention_backward, causal_conv_depthwise,
                          causal_conv_grouped, conv_stack, conv_stack_backward, cp_equivalence, cp_layout,
                          halo_exchange_conv, shard_sequence, unshard_sequence, value_shift, value_shift_backward,
                          value_shift_dist)
from zayasim.numcore import finite_diff_grad
from zayasim.simfabric import Fabric


def test_layout_examples():
    lay = cp_layout(8, 1)
    assert lay.assignment == [(0, 1)] and list(lay.positions(0)) == list(range(8))
    lay = cp_layout(8, 2)
    assert lay.chunk_len == 2 and lay.assignment == [(0, 3), (1, 2)]
    with pytest.raises(ValueError):
        cp_layout(10, 2)


@pytest.mark.parametrize("cp", [2, 4, 8])
def test_causal_work_balanced(cp):
    lay = cp_layout(16 * cp, cp)
    assert len({lay.causal_work(r) for r in range(cp)}) == 1
    # and the pairing covers every chunk once
    assert sorted(c for pair in lay.assignment for c in pair) == list(range(2 * cp))


def test_shard_unshard_roundtrip():
    lay = cp_layout(16, 4)
    x = np.arange(32.0).reshape(16, 2)
    assert np.array_equal(unshard_sequence(shard_sequence(x, lay), lay), x)


def naive_conv(x, w):
    T, C = x.shape
    k = w.shape[0]
    y = np.zeros_like(x)
    for t in range(T):
        for c in range(C):
            for j in range(k):
                s = t - (k - 1) + j
                if s >= 0:
                    y[t, c] += w[j, c] * x[s, c]
    return y


def test_depthwise_conv_against_loops():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((7, 3)), rng.standard_normal((3, 3))
    np.testing.assert_allclose(causal_conv_depthwise(x, w), naive_conv(x, w), atol=1e-14)


def test_identity_taps_are_noop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 4))
    assert np.array_equal(causal_conv_depthwise(x, np.array([[0.0] * 4, [1.0] * 4])), x)
    w1 = np.zeros((2, 4, 2))
    w1[1] = np.tile(np.eye(2), (2, 1))
    assert np.array_equal(causal_conv_grouped(x, w1, 2), x)


def test_conv_stack_backward_fd():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 4))
    p = ConvParams(rng.standard_normal((2, 4)), rng.standard_normal((2, 4, 2)), 2)
    dy = rng.standard_normal((6, 4))
    dx, dw0, dw1 = conv_stack_backward(x, p, dy)
    np.testing.assert_allclose(dx, finite_diff_grad(lambda z: np.sum(conv_stack(z, p) * dy), x), rtol=1e-6, atol=1e-8)
    f0 = lambda w: np.sum(conv_stack(x, ConvParams(w, p.w1, 2)) * dy)
    np.testing.assert_allclose(dw0, finite_diff_grad(f0, p.w0), rtol=1e-6, atol=1e-8)
    f1 = lambda w: np.sum(conv_stack(x, ConvParams(p.w0, w, 2)) * dy)
    np.testing.assert_allclose(dw1, finite_diff_grad(f1, p.w1), rtol=1e-6, atol=1e-8)


def test_attention_against_dense_softmax():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((5, 2, 3)) for _ in range(3))
    o, _ = causal_attention(q, k, v)
    for h in range(2):
        s = q[:, h] @ k[:, h].T / np.sqrt(3)
        s[np.triu_indices(5, 1)] = -np.inf
        pr = np.exp(s - s.max(1, keepdims=True))
        pr /= pr.sum(1, keepdims=True)
        np.testing.assert_allclose(o[:, h], pr @ v[:, h], atol=1e-14)


def test_attention_backward_fd():
    rng = np.random.default_rng(4)
    q, k, v, do = (rng.standard_normal((4, 2, 3)) for _ in range(4))
    dq, dk, dv = causal_attention_backward(q, k, v, do)
    np.testing.assert_allclose(dq, finite_diff_grad(lambda z: np.sum(causal_attention(z, k, v)[0] * do), q),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dk, finite_diff_grad(lambda z: np.sum(causal_attention(q, z, v)[0] * do), k),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dv, finite_diff_grad(lambda z: np.sum(causal_attention(q, k, z)[0] * do), v),
                               rtol=1e-6, atol=1e-8)


def test_value_shift_constant_sequence():
    v = np.ones((8, 3))
    s = value_shift(v)
    assert np.array_equal(s[0], np.zeros(3)) and np.array_equal(s[1:], v[1:])
    dy = np.arange(24.0).reshape(8, 3)
    assert np.array_equal(value_shift_backward(dy)[:-1], dy[1:]) and not value_shift_backward(dy)[-1].any()


def test_value_shift_dist_bitwise():
    lay = cp_layout(8, 2)
    v = np.random.default_rng(5).standard_normal((8, 3))
    parts = shard_sequence(v, lay)
    out = Fabric(2).run(lambda comm: (yield from value_shift_dist(comm, lay, parts[comm.rank])))
    assert np.array_equal(unshard_sequence(out, lay), value_shift(v))


def test_halo_cp1_sends_nothing():
    lay = cp_layout(8, 1)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 4))
    p = ConvParams(rng.standard_normal((2, 4)), rng.standard_normal((2, 4, 2)), 2)
    fab = Fabric(1)
    (y, log), = fab.run(lambda comm: (yield from halo_exchange_conv(comm, lay, x, p)))
    assert fab.transcript == []
    np.testing.assert_allclose(y, conv_stack(x, p), atol=1e-12)


@pytest.mark.parametrize("cp", [1, 2, 4])
@pytest.mark.parametrize("seq", [8, 16, 32])
def test_cp_equivalence(cp, seq):
    rep = cp_equivalence(cp, seq, seed=cp * 100 + seq)
    assert max(rep.conv_fwd_err, rep.shift_fwd_err, rep.attn_fwd_err) <= 1e-12
    assert max(rep.conv_bwd_err, rep.shift_bwd_err, rep.attn_bwd_err) <= 1e-10
    assert rep.halos == 2 * cp - 1 and rep.halo_tokens == [2]
    assert rep.kv_steps_per_rank == [cp - 1] * cp


def test_halo_volume_independent_of_seq():
    a, b = cp_equivalence(2, 8), cp_equivalence(2, 32)
    assert a.halo_bytes == b.halo_bytes == a.halo_messages * 2 * 4 * 8
