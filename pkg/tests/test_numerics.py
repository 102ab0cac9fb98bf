"""Engine correctness: hand oracles plus finite-difference sweeps."""

import numpy as np
import pytest

from s2st.numerics import NumericsError, Parameter, Tape, Tensor, grad_check, ops, stream


def test_softmax_uniform_logits_oracle():
    out = ops.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal((4, 7)) * rng.uniform(0.1, 50)
        s = ops.softmax(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(s >= 0)


def test_softmax_extreme_logits_stable():
    x = np.array([[1000.0, -1000.0, 0.0], [-1e9, -1e9, -1e9]])
    s = ops.softmax(Tensor(x)).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(s[1], np.full(3, 1.0 / 3.0), atol=1e-9)


def test_layer_norm_constant_vector_is_zero():
    out = ops.layer_norm(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_statistics():
    rng = np.random.default_rng(1)
    y = ops.layer_norm(Tensor(rng.standard_normal((3, 4, 64)))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_weighted_sum_gradient_oracle():
    # loss = sum(w * x)  =>  dloss/dw = x
    x = np.array([1.0, -2.0, 3.0])
    w = Parameter("w", np.array([0.5, 0.5, 0.5]))
    tape = Tape()
    with tape:
        loss = ops.sum_(ops.mul(w, Tensor(x)))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, x)


def test_cross_entropy_uniform_logits_gradient_oracle():
    # CE(onehot(y), softmax(z)) with uniform logits: dCE/dz = 1/K - onehot(y)
    K = 5
    z = Parameter("z", np.zeros((1, K)))
    onehot = np.zeros((1, K))
    onehot[0, 2] = 1.0
    tape = Tape()
    with tape:
        ce = ops.neg(ops.sum_(ops.mul(ops.log_softmax(z), Tensor(onehot))))
    tape.backward(ce)
    np.testing.assert_allclose(z.grad, np.full((1, K), 1.0 / K) - onehot, atol=1e-12)


def test_gradient_accumulates_on_reuse():
    x = Parameter("x", np.array([2.0]))
    tape = Tape()
    with tape:
        loss = ops.sum_(ops.add(ops.mul(x, 3.0), ops.mul(x, 4.0)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])


def test_double_backward_raises():
    x = Parameter("x", np.ones(3))
    tape = Tape()
    with tape:
        loss = ops.sum_(ops.square(x))
    tape.backward(loss)
    with pytest.raises(NumericsError):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss = ops.sum_(ops.square(x))
    tape.backward(loss)  # reset() makes the tape reusable


def test_backward_requires_scalar():
    x = Parameter("x", np.ones(3))
    tape = Tape()
    with tape:
        y = ops.square(x)
    with pytest.raises(NumericsError):
        tape.backward(y)


def test_no_tape_records_nothing():
    x = Parameter("x", np.ones(3))
    y = ops.square(x)
    assert y.requires_grad is False and y.grad is None


def test_broadcast_add_gradient():
    a = Parameter("a", np.zeros((2, 3)))
    b = Parameter("b", np.zeros((1, 3)))
    tape = Tape()
    with tape:
        loss = ops.sum_(ops.add(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, np.full((1, 3), 2.0))


def test_dropout_eval_is_identity_and_train_scales():
    x = Tensor(np.ones((4, 8)))
    assert ops.dropout(x, 0.5, stream(0, "drop"), train=False) is x
    y = ops.dropout(x, 0.5, stream(0, "drop"), train=True).data
    assert set(np.round(np.unique(y), 6)) <= {0.0, 2.0}


def test_dropout_streams_reproducible():
    x = Tensor(np.ones((16, 16)))
    y1 = ops.dropout(x, 0.3, stream(7, "drop", 5), train=True).data
    y2 = ops.dropout(x, 0.3, stream(7, "drop", 5), train=True).data
    y3 = ops.dropout(x, 0.3, stream(7, "drop", 6), train=True).data
    np.testing.assert_array_equal(y1, y2)
    assert not np.array_equal(y1, y3)


def test_named_streams_order_independent():
    a1 = stream(0, "alpha").standard_normal(4)
    b1 = stream(0, "beta").standard_normal(4)
    b2 = stream(0, "beta").standard_normal(4)
    a2 = stream(0, "alpha").standard_normal(4)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)
    assert not np.array_equal(a1, b1)


def test_conv1d_same_padding_length_oracle():
    # kernel 32 with (16, 15) padding keeps length 100 at stride 1
    x = Tensor(np.random.default_rng(0).standard_normal((1, 100, 4)))
    w = Tensor(np.random.default_rng(1).standard_normal((32, 4, 8)))
    out = ops.conv1d(x, w, padding=(16, 15))
    assert out.data.shape == (1, 100, 8)


def test_conv1d_stride2_ceil_length():
    # stride-2 kernel-3 with (1, 1) padding: T -> ceil(T / 2)
    for T in (7, 8, 9, 16, 33):
        x = Tensor(np.zeros((1, T, 2)))
        w = Tensor(np.zeros((3, 2, 2)))
        out = ops.conv1d(x, w, stride=2, padding=(1, 1))
        assert out.data.shape[1] == -(-T // 2), T


def test_conv1d_matches_numpy_correlate():
    # single channel, no padding: conv1d is plain sliding dot product
    rng = np.random.default_rng(3)
    x = rng.standard_normal(20)
    k = rng.standard_normal(5)
    out = ops.conv1d(Tensor(x[None, :, None]), Tensor(k[:, None, None])).data[0, :, 0]
    np.testing.assert_allclose(out, np.correlate(x, k, mode="valid"), atol=1e-12)


def test_embedding_duplicate_ids_accumulate():
    table = Parameter("emb", np.zeros((4, 2)))
    ids = np.array([1, 1, 3])
    tape = Tape()
    with tape:
        loss = ops.sum_(ops.embedding(table, ids))
    tape.backward(loss)
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    np.testing.assert_allclose(table.grad, expect)


def test_lstm_cell_shapes_and_gate_saturation():
    B, H = 2, 3
    z = np.zeros((B, 4 * H))
    z[:, H : 2 * H] = 100.0  # forget gate pinned open
    z[:, :H] = -100.0  # input gate pinned shut
    c_prev = np.random.default_rng(0).standard_normal((B, H))
    h, c = ops.lstm_cell(Tensor(z), Tensor(c_prev))
    np.testing.assert_allclose(c.data, c_prev, atol=1e-12)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(c_prev), atol=1e-12)


# --- finite-difference sweeps ---------------------------------------------


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add", lambda a, b: ops.add(a, b), [(3, 4), (3, 4)]),
        ("add_broadcast", lambda a, b: ops.add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: ops.sub(a, b), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: ops.mul(a, b), [(3, 4), (1, 4)]),
        ("div", lambda a, b: ops.div(a, ops.add(ops.square(b), 1.0)), [(3, 4), (3, 4)]),
        ("neg", lambda a: ops.neg(a), [(5,)]),
        ("matmul", lambda a, b: ops.matmul(a, b), [(3, 4), (4, 5)]),
        ("matmul_batched", lambda a, b: ops.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
        ("matmul_bcast", lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 5)]),
        ("exp", lambda a: ops.exp(a), [(3, 3)]),
        ("log", lambda a: ops.log(ops.add(ops.square(a), 0.5)), [(3, 3)]),
        ("sqrt", lambda a: ops.sqrt(ops.add(ops.square(a), 0.5)), [(3, 3)]),
        ("square", lambda a: ops.square(a), [(3, 3)]),
        ("sigmoid", lambda a: ops.sigmoid(a), [(3, 3)]),
        ("tanh", lambda a: ops.tanh(a), [(3, 3)]),
        ("swish", lambda a: ops.swish(a), [(3, 3)]),
        ("softplus", lambda a: ops.softplus(a), [(3, 3)]),
        ("softmax", lambda a: ops.softmax(a), [(3, 5)]),
        ("log_softmax", lambda a: ops.log_softmax(a), [(3, 5)]),
        ("layer_norm", lambda a: ops.layer_norm(a), [(3, 8)]),
        ("sum_all", lambda a: ops.sum_(a), [(3, 4)]),
        ("sum_axis", lambda a: ops.sum_(a, axis=1), [(3, 4)]),
        ("sum_keep", lambda a: ops.sum_(a, axis=0, keepdims=True), [(3, 4)]),
        ("mean_axis", lambda a: ops.mean(a, axis=-1), [(3, 4)]),
        ("cumsum", lambda a: ops.cumsum(a, axis=-1), [(2, 6)]),
        ("reshape", lambda a: ops.reshape(a, (4, 3)), [(3, 4)]),
        ("transpose", lambda a: ops.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 4)]),
        ("index_slice", lambda a: ops.index(a, np.s_[:, 1:3]), [(3, 5)]),
        ("index_gather", lambda a: ops.index(a, (slice(None), np.array([0, 0, 2]))), [(2, 4)]),
        ("maximum_scalar", lambda a: ops.maximum_scalar(a, 0.3), [(4, 4)]),
        ("masked_fill", lambda a: ops.masked_fill(a, np.eye(4, dtype=bool), -2.0), [(4, 4)]),
        (
            "lerp_mask",
            lambda a, b: ops.lerp_mask(a, b, np.arange(12.0).reshape(3, 4) % 2),
            [(3, 4), (3, 4)],
        ),
        ("conv1d", lambda x, w, b: ops.conv1d(x, w, b, padding=(2, 2)), [(2, 9, 3), (5, 3, 4), (4,)]),
        ("conv1d_stride", lambda x, w: ops.conv1d(x, w, stride=2, padding=(1, 1)), [(2, 9, 3), (3, 3, 4)]),
        ("conv1d_groups", lambda x, w: ops.conv1d(x, w, padding=(1, 1), groups=2), [(2, 7, 4), (3, 2, 6)]),
        ("conv1d_depthwise", lambda x, w: ops.conv1d(x, w, padding=(3, 3), groups=6), [(1, 11, 6), (7, 1, 6)]),
    ],
)
def test_grad_check_ops(name, fn, shapes):
    assert grad_check(fn, shapes, seed=hash(name) % (2**31)) <= 1e-4


def test_grad_check_lstm_cell():
    def fn(z, c):
        h, c_out = ops.lstm_cell(z, c)
        return ops.add(h, ops.mul(c_out, 0.7))

    assert grad_check(fn, [(3, 12), (3, 3)], seed=11) <= 1e-4


def test_grad_check_composite_chain():
    # exercises reuse, broadcasting, and a reduction in one graph
    def fn(x, w):
        h = ops.tanh(ops.matmul(x, w))
        return ops.mean(ops.mul(h, ops.sigmoid(h)), axis=-1)

    assert grad_check(fn, [(2, 4), (4, 6)], seed=12) <= 1e-4


def test_grad_check_catches_wrong_gradient():
    def bad(a):
        # forward of square, but the tape sees exp's rule via a mismatched pairing
        out = ops.exp(a)
        out.data = np.square(a.data)
        return out

    with pytest.raises(NumericsError):
        grad_check(bad, [(3,)], seed=13)
