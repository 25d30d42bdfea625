"""Tensor ops, autodiff gradients against finite differences, determinism."""

import numpy as np
import pytest

from any2i import tensor as T
from any2i.tensor import (FlopCounter, Tensor, concat, count_flops, embedding,
                          flop_tag, gelu, layer_norm, masked_softmax, matmul,
                          scale, slice_, tensor_mean, tensor_sum, transpose)


def finite_diff_grads(make_loss, params, h=1e-4):
    """Central-difference gradient of a scalar-producing closure w.r.t. each
    float64 parameter tensor; the independent oracle for every autodiff test."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_op_gradient(build, n_params, shapes, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    params = [Tensor(rng.standard_normal(s), requires_grad=True, dtype=np.float64) for s in shapes]
    r = [rng.standard_normal(1)]

    def make_loss():
        out = build(*params)
        if r[0].shape != out.shape:
            r[0] = rng.standard_normal(out.shape)
        return (out * Tensor(r[0], dtype=np.float64)).sum()

    loss = make_loss()
    loss.backward()
    fd = finite_diff_grads(make_loss, params)
    for k in range(n_params):
        assert params[k].grad is not None
        assert max_rel_err(params[k].grad, fd[k]) < tol, f"param {k}"


# -- forward contracts ---------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3)).astype(np.float32)
    out = matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_add_shape_error():
    with pytest.raises(ValueError, match="add"):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


def test_masked_softmax_uniform():
    out = masked_softmax(Tensor(np.zeros(4)), np.ones(4, dtype=bool))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-7)


def test_masked_softmax_rows_sum_to_one_and_masked_exactly_zero():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
        mask = rng.uniform(size=(5, 8)) < 0.6
        mask[:, 0] = True  # keep every row feasible
        out = masked_softmax(x, mask).data
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_softmax_fully_masked_row_raises():
    mask = np.ones((2, 4), dtype=bool)
    mask[1] = False
    with pytest.raises(ValueError, match="no allowed entries"):
        masked_softmax(Tensor(np.zeros((2, 4))), mask)


def test_layer_norm_matches_direct_computation():
    x = np.array([1.0, 2.0, 3.0], dtype=np.float64)
    g = Tensor(np.ones(3, dtype=np.float64))
    b = Tensor(np.zeros(3, dtype=np.float64))
    out = layer_norm(Tensor(x), g, b, eps=1e-5).data
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert abs(out.mean()) < 1e-9
    np.testing.assert_allclose(out.std(), 1.0, atol=1e-3)


def test_embedding_gather_and_range_error():
    table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
    out = embedding(table, [2, 0, 2])
    np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])
    with pytest.raises(ValueError, match="out of range"):
        embedding(table, [4])


def test_shape_ops_roundtrip():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    t = Tensor(x)
    assert transpose(transpose(t, (1, 2, 0)), (2, 0, 1)).data.tolist() == x.tolist()
    assert t.reshape(6, 4).reshape(2, 3, 4).data.tolist() == x.tolist()
    np.testing.assert_array_equal(t[1:2, :, 1:3].data, x[1:2, :, 1:3])
    joined = concat([t, t], axis=1)
    assert joined.shape == (2, 6, 4)


def test_non_scalar_backward_raises():
    with pytest.raises(ValueError, match="scalar"):
        Tensor(np.zeros(3), requires_grad=True).sum(axis=0, keepdims=True).backward()


def test_gradient_reuse_of_one_tensor():
    # x appears twice: d/dx sum(x + x) = 2, d/dx sum(x*x) = 2x
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2.0)
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-6)


def test_shared_gradient_buffers_do_not_alias():
    # (a + b) feeds two consumers; b's gradient must stay independent of a's
    a = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    b = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    s = a + b
    ((s * s) + s).sum().backward()
    np.testing.assert_allclose(a.grad, 2.0 * s.data + 1.0)
    np.testing.assert_allclose(b.grad, a.grad)


def test_non_finite_data_rejected():
    with pytest.raises(ValueError, match="finite"):
        Tensor(np.array([1.0, np.inf]))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
        w = T.trunc_normal(np.random.default_rng(8), (6, 6))
        out = gelu(x @ w).sum()
        out.backward()
        return out.data.copy(), x.grad.copy()
    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_flop_counter_matmul_and_tags():
    c = FlopCounter()
    with count_flops(c):
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 5))))
        with flop_tag("attention"):
            matmul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
    assert c.total == 2 * 3 * 4 * 5 + 2 * 2 * 2 * 2
    assert c.by_tag["attention"] == 16
    assert c.by_tag["other"] == 120


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


# -- gradients of every primitive vs central finite differences -----------------


def test_grad_matmul():
    check_op_gradient(lambda a, b: a @ b, 2, [(3, 4), (4, 5)])


def test_grad_matmul_batched():
    check_op_gradient(lambda a, b: a @ b, 2, [(2, 3, 4), (2, 4, 3)])


def test_grad_add_broadcast():
    check_op_gradient(lambda a, b: a + b, 2, [(3, 4), (4,)])


def test_grad_sub():
    check_op_gradient(lambda a, b: a - b, 2, [(3, 4), (3, 4)])


def test_grad_mul_broadcast():
    check_op_gradient(lambda a, b: a * b, 2, [(2, 3), (3,)])


def test_grad_scale():
    check_op_gradient(lambda a: scale(a, -1.7), 1, [(4, 2)])


def test_grad_gelu():
    check_op_gradient(lambda a: gelu(a), 1, [(11,)])


def test_grad_masked_softmax():
    mask = np.array([[True, True, False, True], [True, False, True, True]])
    check_op_gradient(lambda a: masked_softmax(a, mask), 1, [(2, 4)])


def test_grad_layer_norm():
    check_op_gradient(lambda a, g, b: layer_norm(a, g, b), 3, [(3, 6), (6,), (6,)])


def test_grad_embedding():
    ids = np.array([1, 3, 1, 0])
    check_op_gradient(lambda t: embedding(t, ids), 1, [(5, 3)])


def test_grad_reshape_transpose():
    check_op_gradient(lambda a: transpose(a.reshape(3, 4), (1, 0)), 1, [(2, 6)])


def test_grad_concat():
    check_op_gradient(lambda a, b: concat([a, b], axis=1), 2, [(2, 3), (2, 2)])


def test_grad_slice():
    check_op_gradient(lambda a: slice_(a, (slice(1, 3), slice(None, 2))), 1, [(4, 3)])


def test_grad_sum_mean():
    check_op_gradient(lambda a: tensor_sum(a, axis=1), 1, [(3, 5)])
    check_op_gradient(lambda a: tensor_mean(a), 1, [(3, 5)])


def test_grad_masked_softmax_cross_entropy():
    # masked softmax-cross-entropy vs central finite differences (h=1e-4, 64-bit)
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 4] = mask[2, 0] = False
    onehot = np.zeros((3, 5))
    onehot[0, 1] = onehot[1, 4] = onehot[2, 2] = 1.0

    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)

    def make_loss():
        p = masked_softmax(logits, mask)
        picked = (p * Tensor(onehot, dtype=np.float64)).sum(axis=1)
        return scale(T.log(picked).mean(), -1.0)

    make_loss().backward()
    fd = finite_diff_grads(make_loss, [logits])[0]
    assert max_rel_err(logits.grad, fd) < 1e-4


def test_grad_log():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(0.2, 3.0, size=7), requires_grad=True, dtype=np.float64)

    def make_loss():
        return T.log(x).sum()

    make_loss().backward()
    fd = finite_diff_grads(make_loss, [x])[0]
    assert max_rel_err(x.grad, fd) < 1e-4
    with pytest.raises(ValueError, match="positive"):
        T.log(Tensor(np.array([0.0, 1.0])))
