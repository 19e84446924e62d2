import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handctx import tensor as T
from handctx.errors import ConfigError, DimensionError, NumericError, UsageError
from handctx.gradcheck import check_gradients
from handctx.tensor import Tape, Tensor


def rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def test_matmul_identity_and_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_fd():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    errs = check_gradients(lambda: (a @ b).sum(), {"a": a, "b": b})
    assert errs["a"] <= 1e-6 and errs["b"] <= 1e-6


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 2)
    errs = check_gradients(lambda: T.square(a @ b).sum(), {"a": a, "b": b})
    assert max(errs.values()) <= 1e-6


def test_softmax_rows_cases():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    out = T.softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_softmax_high_precision_reference():
    import mpmath

    mpmath.mp.dps = 50
    es = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(e / sum(es)) for e in es]
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], ref, rtol=0, atol=1e-15)


def test_softmax_nonfinite_raises():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[np.inf, 0.0]]))


def test_conv2d_identity_and_ones_kernel():
    rng = np.random.default_rng(2)
    img = rng.uniform(-1, 1, (5, 6, 1))
    out = T.conv2d(Tensor(img), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, img)
    const = np.full((6, 6, 1), 0.7)
    out = T.conv2d(Tensor(const), Tensor(np.ones((3, 3, 1, 1))), padding=1).data
    np.testing.assert_allclose(out[1:-1, 1:-1, 0], 9 * 0.7, rtol=1e-15)
    assert out[0, 0, 0] == pytest.approx(4 * 0.7)


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 6, 3))
    k = rng.normal(size=(3, 2, 3, 4))
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 2, :]
                ref[n, i, j] = np.einsum("abc,abcd->d", patch, k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv2d_gradient_fd(stride, padding):
    rng = np.random.default_rng(4)
    x, k = rand(rng, 2, 6, 5, 2), rand(rng, 3, 3, 2, 3)
    errs = check_gradients(lambda: T.square(T.conv2d(x, k, stride, padding)).sum(), {"x": x, "k": k})
    assert max(errs.values()) <= 1e-6


@pytest.mark.parametrize("stride,padding", [(0, 0), (1, -1), (1.5, 0)])
def test_conv2d_bad_config(stride, padding):
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((3, 3, 1, 1))), stride, padding)


def test_conv2d_kernel_too_large():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))


def test_elementwise_basics():
    assert T.exp(Tensor(0.0)).item() == 1.0
    x = Tensor(-3.0, requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
    tape.backward(y)
    assert y.item() == 0.0 and x.grad == 0.0
    with pytest.raises(DimensionError):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


def test_composite_expression_gradient():
    rng = np.random.default_rng(5)
    a, b = rand(rng, 3, 4), rand(rng, 4)
    c = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)

    def f():
        z = T.exp(a * b) - T.relu(a) + T.square(a - b) / c
        z = T.log(c) * T.sin(z) + T.cos(a) * T.sqrt(c)
        z = T.atan2(z, c) + T.smooth_l1(z * 3.0) + T.bce_with_logits(z, np.full(z.shape, 0.3))
        return z.reshape(4, 3).transpose().mean() + T.softmax(z, axis=0).sum(axis=1)[1:].sum()

    errs = check_gradients(f, {"a": a, "b": b, "c": c})
    assert max(errs.values()) <= 1e-5, errs


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_elementwise_ops_fd_property(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 2)
    y = Tensor(rng.uniform(0.2, 1, (3, 2)), requires_grad=True)
    ops = [
        lambda: T.exp(x).sum(),
        lambda: T.square(x * y).sum(),
        lambda: (x / y).sum(),
        lambda: T.scale(x - y, 2.5).sum(),
        lambda: T.log(y).sum(),
        lambda: T.abs_(x + 2.0).sum(),
        lambda: T.sigmoid(x).mean(axis=0).sum(),
        lambda: T.concat([x, y], axis=1)[:, 1:3].sum(),
    ]
    for op in ops:
        assert max(check_gradients(op, {"x": x, "y": y}).values()) <= 1e-5


def test_backward_trivial_cases():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x.zero_grad()
    with Tape() as tape:
        loss = (x * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_gradient_accumulation_is_additive():
    rng = np.random.default_rng(6)
    x = rand(rng, 4)
    with Tape() as tape:
        l1 = T.exp(x).sum()
        l2 = T.square(x).sum()
        both = l1 + l2
    tape.backward(both)
    g_both = x.grad.copy()
    x.zero_grad()
    tape.backward(l1)
    tape.backward(l2)
    np.testing.assert_allclose(x.grad, g_both, rtol=1e-15)


def test_tape_order_and_single_visit():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
        z = y * y + y
    ids = [r.out_id for r in tape.records]
    assert ids == sorted(ids)
    tape.backward(z)
    assert x.grad == pytest.approx(4 * 8 + 4)


def test_no_recording_outside_tape():
    x = Tensor(1.0, requires_grad=True)
    y = x * 3.0
    assert y._tape is None


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        a, b = rand(rng, 5, 5), rand(rng, 5, 5)
        with Tape() as tape:
            loss = T.softmax(a @ b).sum() + T.exp(a).mean()
        tape.backward(loss)
        return loss.data.tobytes() + a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def test_concurrent_tapes_are_independent():
    results = {}

    def work(k):
        x = Tensor(np.full(3, float(k)), requires_grad=True)
        with Tape() as tape:
            for _ in range(200):
                loss = T.square(x).sum()
        tape.backward(loss)
        results[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        np.testing.assert_array_equal(g, np.full(3, 2.0 * k))


def test_perturb_backward_breaks_gradcheck():
    rng = np.random.default_rng(8)
    a, b = rand(rng, 3, 3), rand(rng, 3, 3)
    with T.perturb_backward("matmul"):
        errs = check_gradients(lambda: (a @ b).sum(), {"a": a})
    assert errs["a"] > 0.1
