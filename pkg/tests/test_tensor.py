import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docfuse.errors import DimensionError, NumericError, TapeError
from docfuse.gradcheck import grad_check
from docfuse.tensor import (
    Tensor, add, concat, dropout, matmul, mean, mul, no_grad, parameter, rms_norm, softmax, stack, take, tsum, zeros,
)


def _fd_check(build, arrays, tol=1e-6):
    params = {f"p{k}": parameter(a.copy(), f"p{k}") for k, a in enumerate(arrays)}
    rep = grad_check(lambda: build(*params.values()), params, h=1e-6, tol=tol)
    assert rep.passed, rep.summary()


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)


def test_add_zeros():
    np.testing.assert_array_equal(add(zeros(3), zeros(3)).data, np.zeros(3))


def test_matmul_hand_value():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_non_finite_result_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        mul(Tensor([1e308]), Tensor([1e308]))


@pytest.mark.parametrize("x,expect", [
    ([1.0, 1.0], [0.5, 0.5]),
    ([0.0, 0.0, 0.0, 0.0], [0.25] * 4),
    ([0.0, np.log(3.0)], [0.25, 0.75]),
])
def test_softmax_examples(x, expect):
    np.testing.assert_allclose(softmax(Tensor(x)).data, expect, rtol=0, atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((2, 0))), axis=-1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_softmax_simplex(seed, n, m):
    x = np.random.default_rng(seed).normal(0, 10, (n, m))
    p = softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_rms_norm_examples():
    one = Tensor(np.ones(4))
    np.testing.assert_allclose(rms_norm(Tensor(np.ones(4)), one, 1e-6).data, 1.0, atol=1e-6)
    np.testing.assert_array_equal(rms_norm(Tensor(np.zeros(4)), one, 1e-6).data, 0.0)
    np.testing.assert_allclose(rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), 1e-300).data,
                               [0.848528, 1.131371], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_rms_norm_scale_covariant(seed, d):
    rng = np.random.default_rng(seed)
    x, w = Tensor(rng.normal(size=(3, d))), rng.normal(size=d)
    a = rms_norm(x, Tensor(2 * w)).data
    b = 2 * rms_norm(x, Tensor(w)).data
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


def test_rms_norm_unit_rms():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 16)))
    y = rms_norm(x, Tensor(np.ones(16))).data
    np.testing.assert_allclose(np.sqrt((y ** 2).mean(-1)), 1.0, atol=1e-5)


def test_rms_norm_float32_storage_upcasts():
    x = np.random.default_rng(2).normal(size=(2, 8)).astype(np.float32)
    y = rms_norm(Tensor(x), Tensor(np.ones(8, dtype=np.float32))).data
    assert y.dtype == np.float32
    ref = x.astype(np.float64) / np.sqrt((x.astype(np.float64) ** 2).mean(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(y, ref, rtol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_basic_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    proj = Tensor(rng.normal(size=(3, 2)))
    _fd_check(lambda x, y, z: tsum(matmul(add(x, y) * x, z) * proj), [a, b, c])


def test_structural_ops_backward():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    w = Tensor(rng.normal(size=(4, 3)))
    _fd_check(lambda x, y: tsum(concat([x, y], axis=0) * w), [a, b])
    w2 = Tensor(rng.normal(size=(2, 2, 3)))
    _fd_check(lambda x, y: tsum(stack([x, y], axis=0) * w2), [a, b])
    _fd_check(lambda x: tsum(x[1:, ::2] * Tensor([[2.0, -1.0]])), [a])
    _fd_check(lambda x: tsum(take(x, np.array([[1, 0], [1, 1]]), axis=0) * Tensor(np.ones((2, 2, 3)))), [a])
    _fd_check(lambda x: mean(softmax(x, axis=-1) * w[:2]), [a])
    _fd_check(lambda x: tsum(x.reshape(3, 2).transpose() * Tensor(np.arange(6.0).reshape(2, 3))), [a])


def test_second_backward_rejected():
    x = parameter(np.ones(3))
    loss = tsum(x * x)
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2.0)
    with pytest.raises(TapeError):
        loss.backward()


def test_backward_without_grad_rejected():
    with pytest.raises(TapeError):
        tsum(Tensor(np.ones(3))).backward()


def test_gradients_accumulate_over_shared_nodes():
    x = parameter(np.array([2.0]))
    y = x * x
    tsum(y + y).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_dropout_identity_when_not_training():
    x = Tensor(np.arange(6.0))
    np.testing.assert_array_equal(dropout(x, 0.5, None, training=False).data, x.data)


def test_dropout_seeded_reproducible():
    x = Tensor(np.ones(1000))
    a = dropout(x, 0.3, np.random.default_rng(5), training=True).data
    b = dropout(x, 0.3, np.random.default_rng(5), training=True).data
    np.testing.assert_array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], 1 / 0.7)
    assert 0.6 < kept.mean() < 0.8


def test_dropout_requires_generator():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 0.3, None, training=True)


def test_grad_check_polynomial():
    x = parameter(np.array([3.0]))
    rep = grad_check(lambda: tsum(x * x), {"x": x}, h=1e-5)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_detects_nondeterminism():
    from docfuse.errors import DeterminismError

    x = parameter(np.array([1.0]))
    state = {"n": 0}

    def f():
        state["n"] += 1
        return tsum(x * float(state["n"]))

    with pytest.raises(DeterminismError):
        grad_check(f, {"x": x})


def test_grad_check_catches_wrong_gradient():
    from docfuse.tensor import _result

    x = parameter(np.array([1.5, -0.5]))

    def bad_square(t):
        return _result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # should be 2x

    rep = grad_check(lambda: tsum(bad_square(x)), {"x": x})
    assert not rep.passed
