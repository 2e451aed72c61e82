import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docfuse.errors import DimensionError
from docfuse.fusion import FusionParams, fuse
from docfuse.gradcheck import grad_check
from docfuse.suites import fusion_loss
from docfuse.tensor import Tensor


def _unit(d=1, eps=1e-300):
    one = lambda: Tensor(np.ones((d, d)))  # noqa: E731
    return FusionParams(one(), one(), one(), Tensor(np.ones(d)), dropout_rate=0.0, eps=eps)


def test_hand_trace_both_modalities():
    out = fuse(Tensor([[[1.0]]]), Tensor([[[1.0]]]), _unit())
    assert abs(out.item() - 5.0) < 1e-9


def test_hand_trace_text_only():
    out = fuse(Tensor([[[1.0]]]), Tensor([[[0.0]]]), _unit())
    assert abs(out.item() - 3.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 5))
def test_zero_output_projection_is_identity(seed, d, n):
    rng = np.random.default_rng(seed)
    p = FusionParams.init(d, rng, dropout_rate=0.2)
    p.O.data[:] = 0.0
    t = Tensor(rng.normal(size=(2, n, d)))
    out = fuse(t, Tensor(rng.normal(size=(2, n, d))), p, training=True, rng=rng)
    assert out.shape == t.shape
    np.testing.assert_array_equal(out.data, t.data)


def test_dropout_reproducible_under_seed():
    rng = np.random.default_rng(0)
    p = FusionParams.init(4, rng, dropout_rate=0.5)
    t, i = Tensor(rng.normal(size=(1, 3, 4))), Tensor(rng.normal(size=(1, 3, 4)))
    a = fuse(t, i, p, True, np.random.default_rng(7)).data
    b = fuse(t, i, p, True, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, fuse(t, i, p).data)


def test_shape_mismatch():
    p = FusionParams.init(4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        fuse(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 2, 4))), p)
    with pytest.raises(DimensionError):
        fuse(Tensor(np.zeros((1, 3, 5))), Tensor(np.zeros((1, 3, 5))), p)


def test_param_shape_validation():
    with pytest.raises(DimensionError):
        FusionParams(Tensor(np.eye(2)), Tensor(np.eye(3)), Tensor(np.eye(2)), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        FusionParams(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.ones(2)), dropout_rate=1.0)


def test_fusion_gradients():
    loss, params = fusion_loss(seed=3)
    rep = grad_check(loss, params, h=1e-5, tol=1e-4)
    assert rep.passed, rep.summary()
    assert set(params) == {"fusion.V", "fusion.R", "fusion.O", "fusion.w"}
