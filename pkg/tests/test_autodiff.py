import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from corrflow import autodiff as ad
from corrflow.autodiff import AdamState, GradientTape, RunningStats, ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- tensor & tape ----------------------------------------------------------


def test_square_gradient_at_three():
    x = leaf(3.0)
    ad.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_detached_tensor_gets_no_gradient():
    x = leaf([1.0, 2.0])
    d = x.detach()
    ad.backward(ad.total(ad.mul(x, d)))
    assert d.grad is None
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(leaf([1.0, 2.0]), 2.0))


def test_tape_visits_each_node_once_on_a_diamond():
    x = leaf(2.0)
    y = ad.mul(x, x)
    z = ad.add(y, y)
    tape = GradientTape.record(z)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    ad.backward(z)
    assert x.grad == pytest.approx(8.0)  # d(2x^2)/dx


def test_every_reachable_leaf_gets_a_grad():
    a, b, c = leaf([1.0]), leaf([2.0]), leaf([3.0])
    ad.backward(ad.total(ad.add(ad.mul(a, b), c)))
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape


@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_add_identities(a):
    x = Tensor(a)
    np.testing.assert_array_equal(ad.add(x, Tensor(np.zeros_like(a))).data, a)
    np.testing.assert_array_equal(ad.add(x, -x).data, np.zeros_like(a))


def test_add_passes_upstream_gradient_to_both_operands():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    w = np.array([5.0, -7.0])
    ad.backward(ad.total(ad.mul(ad.add(a, b), Tensor(w))))
    np.testing.assert_array_equal(a.grad, w)
    np.testing.assert_array_equal(b.grad, w)


# -- relu ----------------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_all_negative_zero_output_and_gradient():
    x = leaf(-np.arange(1.0, 5.0))
    ad.backward(ad.total(ad.relu(x)))
    assert not ad.relu(x).data.any()
    assert not x.grad.any()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3)))
def test_relu_gradient_check(a):
    x = leaf(a)
    w = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
    assert ad.finite_diff_check(lambda: ad.total(ad.mul(ad.relu(x), w)), [x], eps=1e-7) < 1e-4


# -- softmax ----------------------------------------------------------------


def test_softmax_two_logits_closed_form():
    p = ad.softmax_over(Tensor(np.array([1.0, 0.0])), -1).data
    e = math.e
    np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)


def test_softmax_uniform_window():
    p = ad.softmax_over(Tensor(np.zeros((13, 13))), (0, 1)).data
    np.testing.assert_allclose(p, 1 / 169, rtol=1e-12)


def test_softmax_mask_is_exact_zero():
    p = ad.softmax_over(Tensor(np.array([5.0, 5.0, 123.0])), -1, np.array([True, True, False])).data
    assert p.tolist() == [0.5, 0.5, 0.0]


def test_softmax_fully_masked_group_raises():
    with pytest.raises(ValueError):
        ad.softmax_over(Tensor(np.zeros((2, 3))), -1, np.array([[True, False, False], [False, False, False]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-500, 500)), st.integers(0, 2**32 - 1))
def test_softmax_groups_sum_to_one(logits, seed):
    mask = np.random.default_rng(seed).random((4, 5)) > 0.4
    mask[:, 2] = True
    p = ad.softmax_over(Tensor(logits), -1, mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert (p[~mask] == 0).all() and (p >= 0).all()


# -- conv2d ------------------------------------------------------------------


def test_conv_identity_kernel_is_identity():
    x = np.ones((3, 3, 1))
    k = np.ones((1, 1, 1, 1))
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(k), stride=1).data, x)


@given(arrays(np.float64, (5, 6, 2), elements=finite))
def test_conv_identity_kernel_multichannel(x):
    k = np.eye(2).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_stride_two_hand_sum():
    x = np.arange(16.0).reshape(4, 4, 1)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), stride=2, pad=1).data
    assert out.shape == (2, 2, 1)
    # top-left window covers padded rows/cols -1..1 -> real pixels (0..1, 0..1)
    assert out[0, 0, 0] == x[:2, :2].sum()
    assert out[1, 1, 0] == x[1:4, 1:4].sum()


def test_conv_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, k = leaf(rng.standard_normal((8, 8, 3))), leaf(rng.standard_normal((3, 3, 3, 4)))
    w = Tensor(rng.standard_normal((8, 8, 4)))
    err = ad.finite_diff_check(lambda: ad.total(ad.mul(ad.conv2d(x, k), w)), [x, k], eps=1e-6)
    assert err < 1e-4


def test_conv_rejects_bad_stride():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=3)


# -- batch norm --------------------------------------------------------------


def test_batch_norm_constant_channel_is_zero():
    x = Tensor(np.full((2, 3, 3, 1), 4.0))
    out = ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), RunningStats.fresh(1, np.float64))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_affine_contract():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8, 8, 2))
    x = (x - x.mean((0, 1, 2))) / x.std((0, 1, 2))
    out = ad.batch_norm(Tensor(x), Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), RunningStats.fresh(2, np.float64)).data
    np.testing.assert_allclose(out.mean((0, 1, 2)), 3.0, atol=1e-5)
    np.testing.assert_allclose(out.std((0, 1, 2)), 2.0, atol=1e-5)


def test_batch_norm_eval_with_unit_stats_is_affine():
    x = np.random.default_rng(1).standard_normal((3, 3, 2))
    out = ad.batch_norm(Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.0, 1.0])), RunningStats.fresh(2, np.float64), "eval").data
    np.testing.assert_allclose(out, x / np.sqrt(1 + ad.BN_EPS) * [2.0, 1.0] + [0.0, 1.0])


def test_batch_norm_train_updates_running_stats():
    x = np.random.default_rng(2).standard_normal((10, 3)) * 2 + 5
    stats = RunningStats.fresh(3, np.float64)
    ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, "train")
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(0))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(0, ddof=1))


# -- optimizer ---------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0]))}
    st_ = AdamState.zeros_like(p)
    ad.adam_step(p, {"w": np.array([1.0])}, st_, 2e-4)
    assert 1.0 - p["w"].data[0] == pytest.approx(2e-4, rel=1e-4)


def test_adam_zero_gradient_is_identity():
    p = {"w": Tensor(np.array([0.3, -2.0]))}
    st_ = AdamState.zeros_like(p)
    for _ in range(50):
        ad.adam_step(p, {"w": np.zeros(2)}, st_, 1e-2)
    np.testing.assert_array_equal(p["w"].data, [0.3, -2.0])


def test_adam_minimises_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamState.zeros_like({"x": x})
    for _ in range(2000):
        x.grad = None
        ad.backward(ad.total(ad.mul(x, x)))
        ad.adam_step({"x": x}, {"x": x.grad}, st_, 1e-2)
    assert abs(x.data[0]) < 1e-2


# -- gradient checker itself ----------------------------------------------------


def test_finite_diff_linear_is_exact():
    x = leaf(np.arange(5.0))
    w = Tensor(np.array([1.0, -2.0, 3.0, 0.5, 7.0]))
    # no truncation error for a linear map, so a wide step only shrinks round-off
    assert ad.finite_diff_check(lambda: ad.total(ad.mul(x, w)), [x], eps=1e-3) < 1e-10


def test_finite_diff_two_class_cross_entropy():
    # hand value: d/dz0 of -log softmax(z)[0] at z=(1,0) is p0 - 1 = -1/(e+1)
    z = leaf([[1.0, 0.0]])
    loss = lambda: ad.nll_of_probs(ad.softmax_over(z, -1), np.array([0]))  # noqa: E731
    ad.backward(loss())
    assert z.grad[0, 0] == pytest.approx(-1 / (math.e + 1), rel=1e-7)
    assert ad.finite_diff_check(loss, [z]) < 1e-6


def test_finite_diff_detects_a_wrong_gradient():
    x = leaf([1.0, 2.0])

    def bad_square():
        def grad_fn(g):
            return (g * 3 * x.data,)  # wrong: should be 2x

        return ad.total(ad._make(x.data**2, (x,), grad_fn))

    assert ad.finite_diff_check(bad_square, [x]) > 0.1


OPS = {
    "matmul": lambda a, b: ad.matmul(a, b),
    "l2_normalize": lambda a, b: ad.mul(ad.l2_normalize(a), a),
    "log": lambda a, b: ad.log(ad.mul(a, a), 1e-3),
    "softmax": lambda a, b: ad.mul(ad.softmax_over(a, -1), b),
    "transpose": lambda a, b: ad.mul(ad.transpose(ad.transpose(a)), b),
    "mean": lambda a, b: ad.scale(ad.mean(ad.mul(a, b)), 3.0),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_op_gradients_random_shapes(name, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    a = leaf(rng.standard_normal((n, n)) + 0.1)
    b = leaf(rng.standard_normal((n, n)))
    w = Tensor(rng.standard_normal((n, n)) if name != "mean" else np.ones(()))
    f = OPS[name]
    loss = lambda: ad.total(ad.mul(f(a, b), w)) if name != "mean" else f(a, b)  # noqa: E731
    assert ad.finite_diff_check(loss, [a, b], eps=1e-6) < 1e-4


def test_float32_inputs_stay_float32():
    x = Tensor(np.ones((2, 4, 4, 3), dtype=np.float32))
    k = Tensor(np.ones((3, 3, 3, 2), dtype=np.float32))
    assert ad.conv2d(x, k).dtype == np.float32
    assert ad.as_float64({"k": k})["k"].dtype == np.float64
