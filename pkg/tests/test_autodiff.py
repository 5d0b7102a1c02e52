import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convexmenu import autodiff as ad
from conftest import fd_grad, leaf

finite = st.floats(-3, 3, allow_nan=False)


def test_softplus_at_zero_is_ln2():
    assert ad.softplus(0.0).value == pytest.approx(math.log(2), abs=1e-15)


def test_logsumexp_large_inputs_do_not_overflow():
    out = ad.logsumexp(np.array([1000.0, 1000.0]))
    assert out.value == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_inner_product_value():
    assert ad.inner(np.array([1.0, 2.0]), np.array([3.0, 4.0])).value == 11.0


def test_grad_of_inner_is_other_operand():
    w = leaf([0.3, -1.2, 2.0])
    x = np.array([1.5, 0.5, -2.0])
    ad.backward(ad.inner(w, x))
    np.testing.assert_array_equal(w.grad, x)


def test_softplus_grad_at_zero_is_half():
    w = leaf(0.0)
    ad.backward(ad.softplus(w))
    assert w.grad == pytest.approx(0.5)


def test_stop_gradient_blocks_flow():
    w = leaf(3.0)
    ad.backward(ad.stop_gradient(w * w) + 0.0 * w)
    assert w.grad == 0.0


def test_product_with_frozen_factor():
    w = leaf(3.0)
    ad.backward(w * ad.stop_gradient(w))
    assert w.grad == pytest.approx(3.0)


def test_non_scalar_root_rejected():
    w = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(w, 2.0))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.add(np.zeros((2, 3)), np.zeros((3, 2)))


def test_backward_twice_gives_same_gradient():
    w = leaf([0.5, -0.25])
    root = ad.sum(ad.exp(w) * w)
    ad.backward(root)
    first = w.grad.copy()
    ad.backward(root)
    np.testing.assert_array_equal(w.grad, first)


def test_group_max_hard_examples():
    out = ad.group_max(np.array([1.0, 3.0, 2.0, 0.0]), 2)
    np.testing.assert_array_equal(out.value, [3.0, 2.0])
    np.testing.assert_array_equal(ad.group_max(np.full(6, 0.7), 3).value, [0.7] * 3)


def test_group_max_rejects_empty_or_ragged_groups():
    with pytest.raises(ValueError):
        ad.group_max(np.zeros(5), 2)
    with pytest.raises(ValueError):
        ad.group_max(np.zeros(0), 1)


@given(arrays(np.float64, (3, 4), elements=finite), st.sampled_from([1.0, 16.0, 4096.0]))
def test_soft_group_max_bounds(h, beta):
    hard = ad.group_max(h, 2).value
    soft = ad.group_max(h, 2, soft_beta=beta).value
    E = 2
    assert np.all(soft >= hard - 1e-12)
    assert np.all(soft <= hard + math.log(E) / beta + 1e-12)


def test_clamp_subgradient_convention():
    w = leaf([-0.5, 0.0, 0.5, 1.0, 1.5])
    ad.backward(ad.sum(ad.clamp(w, 0.0, 1.0)))
    np.testing.assert_array_equal(w.grad, [0, 1, 1, 1, 0])


def test_max_reduce_routes_ties_to_lowest_index():
    w = leaf([[2.0, 2.0, 1.0]])
    ad.backward(ad.sum(ad.max_reduce(w)))
    np.testing.assert_array_equal(w.grad, [[1.0, 0.0, 0.0]])


def _composite(W1, W2, w3, x, beta):
    h = ad.softplus(ad.matvec(W1, x))
    h = ad.group_max(ad.leaky_relu(ad.matvec(W2, h)), 2, beta)
    return ad.sum(ad.matvec(w3, h) * ad.exp(ad.scale(h, 0.1)))


@pytest.mark.parametrize("beta", [math.inf, 8.0])
def test_three_layer_composition_matches_finite_differences(rng, beta):
    shapes = [(5, 3), (4, 5), (1, 2)]
    for _ in range(10):
        vals = [rng.standard_normal(s) for s in shapes]
        x = rng.standard_normal((6, 3))
        params = [leaf(v) for v in vals]
        ad.backward(_composite(*params, x, beta))
        for k, p in enumerate(params):
            def f(v, k=k):
                args = [ad.Tensor(a) for a in vals]
                args[k] = ad.Tensor(v)
                return _composite(*args, x, beta).value
            num = fd_grad(f, vals[k])
            assert ad.relative_error(p.grad, num) < 1e-5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_ops_match_finite_differences(a, b):
    def f(av):
        return ad.sum(ad.mul(ad.sub(ad.Tensor(av), b), ad.add(ad.Tensor(av), b))).value
    A = leaf(a)
    ad.backward(ad.sum(ad.mul(ad.sub(A, b), ad.add(A, b))))
    np.testing.assert_allclose(A.grad, fd_grad(f, a), rtol=1e-6, atol=1e-8)


def test_param_store_flat_round_trip(rng):
    store = ad.ParamStore()
    store.add("a", rng.standard_normal((2, 3)))
    store.add("b", rng.standard_normal(4))
    store.freeze()
    theta = store.flat()
    assert theta.size == store.size == 10
    store.set_flat(theta * 2)
    np.testing.assert_array_equal(store.flat(), theta * 2)
    with pytest.raises(Exception):
        store.add("c", np.zeros(1))


def test_numerical_grad_restores_parameters(rng):
    store = ad.ParamStore()
    w = store.add("w", rng.standard_normal(3))
    store.freeze()
    before = store.flat()
    g = ad.numerical_grad(lambda: float(np.sum(w.value ** 2)), store)
    np.testing.assert_allclose(g, 2 * before, rtol=1e-8)
    np.testing.assert_array_equal(store.flat(), before)
