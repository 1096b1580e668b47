import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laserseg import autodiff as ad
from laserseg.autodiff import Tensor
from laserseg.errors import DimensionError, NumericError
from laserseg.gradcheck import check_gradients

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)

UNARY = {
    "exp": ad.exp,
    "log": lambda x: ad.log(ad.exp(x) + 1.0),
    "sqrt": lambda x: ad.sqrt(x * x + 1.0),
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "power": lambda x: ad.power(x * x + 0.5, 1.5),
    "neg": ad.neg,
    "cumsum": lambda x: ad.cumsum(x, axis=1),
    "cumsum_exclusive": lambda x: ad.cumsum(x, axis=1, exclusive=True),
    "l2_norm": lambda x: ad.l2_norm(x, axis=1),
    "softmax": lambda x: ad.softmax(x, axis=1),
    "softmax_axis0": lambda x: ad.softmax(x, axis=0),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "transpose": ad.transpose,
    "mean_axis": lambda x: ad.mean(x, axis=0),
    "take_repeated": lambda x: ad.take(x, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
    "normalize_rows": ad.normalize_rows,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn = UNARY[name]
    errors = check_gradients(lambda t: fn(t["x"]), {"x": rng.standard_normal((3, 4))}, rng)
    assert errors["x"] <= 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients(op, rng):
    fn = getattr(ad, op)
    b = rng.uniform(0.5, 2.0, (1, 4))
    errors = check_gradients(lambda t: fn(t["a"], t["b"]), {"a": rng.standard_normal((3, 4)), "b": b}, rng)
    assert max(errors.values()) <= 1e-6


def test_matmul_and_concat_gradients(rng):
    inputs = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2)), "c": rng.standard_normal((2, 2))}
    errors = check_gradients(lambda t: ad.concat([ad.matmul(t["a"], t["b"]), t["c"]], axis=0), inputs, rng)
    assert max(errors.values()) <= 1e-6


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    assert ad.unbroadcast(g, (3, 1)).tolist() == [[8.0]] * 3
    assert ad.unbroadcast(g, ()).item() == 24.0


def test_shared_subexpression_accumulates():
    x = ad.parameter(np.array([2.0, -1.0]))
    y = x * x + x
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_backward_is_bit_reproducible(rng):
    data = rng.standard_normal((16, 8))

    def run():
        x = ad.parameter(data.copy())
        out = ad.softmax(ad.matmul(x, ad.transpose(x)), axis=-1)
        ad.tsum(out * out).backward()
        return x.grad

    np.testing.assert_array_equal(run(), run())


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_backward_on_constant_raises():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(())).backward()


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax(Tensor(np.array([[0.0, np.inf]])))


def test_detach_cuts_the_graph():
    x = ad.parameter(np.array([1.0, 2.0]))
    y = (x * 3.0).detach()
    assert not y.requires_grad
    z = x * y
    z.sum().backward()
    np.testing.assert_array_equal(x.grad, y.data)


def test_float32_stays_float32():
    x = ad.parameter(np.ones((2, 2), dtype=np.float32))
    out = ad.sigmoid(x * 2.0 + 1.0)
    assert out.dtype == np.float32


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (2, 6), elements=finite))
def test_exclusive_cumsum_shifts_inclusive(x):
    inc = ad.cumsum(Tensor(x), axis=1).data
    exc = ad.cumsum(Tensor(x), axis=1, exclusive=True).data
    np.testing.assert_allclose(exc[:, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(exc[:, 1:], inc[:, :-1], atol=1e-12)


@settings(max_examples=50)
@given(st.floats(-800, 800))
def test_sigmoid_and_softplus_do_not_overflow(v):
    x = Tensor(np.array([v]))
    s = ad.sigmoid(x).data[0]
    sp = ad.softplus(x).data[0]
    assert 0.0 <= s <= 1.0
    assert np.isfinite(sp) and sp >= max(v, 0.0) - 1e-12


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_pairwise_cosine_bounded(x, y):
    c = ad.pairwise_cosine(Tensor(x), Tensor(y)).data
    assert np.all(np.abs(c) <= 1.0 + 1e-12)
