import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leaf import autodiff as ad


def test_add_elementwise():
    out = ad.forward_op("add", ad.tensor([1, 2]), ad.tensor([3, 4]))
    assert out.value.tolist() == [4, 6]


def test_softmax_of_zeros_is_uniform():
    out = ad.forward_op("softmax_rows", ad.tensor([0.0, 0.0]))
    assert out.value.tolist() == [0.5, 0.5]


def test_matmul_of_ones():
    out = ad.forward_op("matmul", ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 2))))
    assert out.value.tolist() == [[3, 3], [3, 3]]


def test_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 2))))


def test_bias_row_broadcast_only():
    out = ad.add(ad.tensor(np.zeros((2, 3))), ad.tensor([1.0, 2.0, 3.0]))
    assert out.value.tolist() == [[1, 2, 3], [1, 2, 3]]
    with pytest.raises(ad.ShapeError):
        ad.add(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((1, 3))))


def test_rank_above_three_rejected():
    with pytest.raises(ad.ShapeError):
        ad.tensor(np.zeros((1, 1, 1, 1)))


def test_non_finite_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.tensor([np.nan])
    big = ad.tensor([1e200])
    with pytest.raises(ad.NonFiniteError):
        ad.mul(big, big)


def test_gather_rows_rejects_bad_index():
    table = ad.tensor(np.eye(3))
    with pytest.raises(IndexError):
        ad.gather_rows(table, np.array([0, 3]))
    with pytest.raises(ad.ShapeError):
        ad.gather_rows(table, np.array([0.5]))


def test_unknown_op():
    with pytest.raises(ValueError):
        ad.forward_op("conv", ad.tensor([1.0]))


def test_square_gradient():
    x = ad.tensor([3.0])
    loss = ad.mean(ad.mul(x, x))
    ad.backward(loss)
    assert x.grad.tolist() == [6.0]


def test_fan_out_accumulates():
    x = ad.tensor([1.0])
    ad.backward(ad.mean(ad.add(x, x)))
    assert x.grad.tolist() == [2.0]


def test_backward_needs_scalar_root():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tensor([1.0, 2.0]))


def test_backward_rezeroes_accumulators():
    x = ad.tensor(np.array([1.0, -2.0, 0.5]))
    loss = ad.sum_all(ad.mul(x, x))
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(loss)
    assert np.array_equal(first, x.grad)


def test_finite_diff_check_linear_is_exact():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert ad.finite_diff_check(ad.sum_all, x) < 1e-8


def test_finite_diff_check_cubic():
    def cube(x):
        return ad.sum_all(ad.mul(ad.mul(x, x), x))

    leaf = ad.tensor([2.0])
    ad.backward(cube(leaf))
    assert leaf.grad[0] == 12.0
    assert ad.finite_diff_check(cube, np.array([2.0]), h=1e-5) < 1e-6


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(ad.sum_all, np.ones(2), h=0.1)


def test_nll_on_random_logits_matches_fd():
    rng = np.random.default_rng(1)
    target = np.zeros((4, 5))
    target[np.arange(4), rng.integers(0, 5, 4)] = -0.25

    def nll(x):
        return ad.sum_all(ad.mul(ad.log_softmax_rows(x), ad.Node(target)))

    assert ad.finite_diff_check(nll, rng.normal(size=(4, 5))) < 1e-4


def test_two_layer_net_matches_fd():
    rng = np.random.default_rng(2)
    w2 = rng.normal(size=(6, 3))
    b1 = rng.normal(size=6)
    x_in = rng.normal(size=(5, 4))

    def net(w1):
        h = ad.relu(ad.add(ad.matmul(ad.Node(x_in), w1), ad.Node(b1)))
        return ad.mean(ad.softmax_rows(ad.matmul(h, ad.Node(w2))) * ad.Node(rng_fixed))

    rng_fixed = rng.normal(size=(5, 3))
    assert ad.finite_diff_check(net, rng.normal(size=(4, 6))) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = ad.softmax_rows(ad.tensor(x)).value
    assert (y >= 0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_concat_and_slice_round_trip():
    a = ad.tensor(np.arange(6.0).reshape(2, 3))
    b = ad.tensor(np.arange(3.0).reshape(1, 3))
    c = ad.concat_rows([a, b])
    assert c.shape == (3, 3)
    s = ad.slice_rows(c, 2, 3)
    assert np.array_equal(s.value, b.value)
    ad.backward(ad.sum_all(s))
    assert b.grad.tolist() == [[1, 1, 1]]
    assert not a.grad.any()
    with pytest.raises(ad.ShapeError):
        ad.slice_rows(c, 2, 2)
