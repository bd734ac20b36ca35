import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glpe_marl import autodiff as ad
from glpe_marl.autodiff import (Adam, AdamState, DimensionError, EmptyInputError, NonFiniteError,
                                OptimizerStateError, RankError, Tensor, adam_step, clip_grad_norm, no_grad)
from glpe_marl.gradcheck import check_case, numerical_gradient

finite = st.floats(-10, 10, allow_nan=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_hand_product(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient(self):
        a = leaf([[1.0, 1.0]])
        ad.sum_all(ad.matmul(a, Tensor([[2.0], [5.0]]))).backward()
        np.testing.assert_array_equal(a.grad, [[2.0, 5.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 3, 5))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=0, atol=1e-14)


class TestPooling:
    def test_mean_equal_rows(self):
        np.testing.assert_array_equal(ad.mean_over_agents(Tensor([[1.0, 2.0], [1.0, 2.0]])).data, [1.0, 2.0])

    def test_mean_formula(self):
        np.testing.assert_array_equal(ad.mean_over_agents(Tensor([[0.0, 0.0], [2.0, 4.0]])).data, [1.0, 2.0])

    def test_mean_gradient(self):
        x = leaf(np.ones((4, 3)))
        ad.sum_all(ad.mean_over_agents(x)).backward()
        np.testing.assert_array_equal(x.grad, np.full((4, 3), 0.25))

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            ad.mean_over_agents(Tensor(np.zeros((0, 3))))

    def test_max_tie_goes_to_first_row(self):
        x = leaf([[1.0, 0.0], [1.0, 2.0], [0.0, 2.0]])
        ad.sum_all(ad.max_over_agents(x)).backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


class TestElementwise:
    def test_tanh_zero(self):
        assert ad.tanh(Tensor(0.0)).item() == 0.0

    def test_elu_closed_form(self):
        assert ad.elu(Tensor(-1.0)).item() == pytest.approx(math.exp(-1) - 1, abs=1e-15)
        assert ad.elu(Tensor(-60.0)).item() == pytest.approx(-1.0, abs=1e-15)

    def test_tanh_grad_at_zero(self):
        x = leaf(0.0)
        ad.tanh(x).backward()
        assert x.grad == 1.0

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ad.elementwise("softplus", Tensor(1.0))

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_elu_derivative_rule(self, x):
        t = leaf(x)
        ad.sum_all(ad.elu(t)).backward()
        expected = np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))
        np.testing.assert_allclose(t.grad, expected, rtol=1e-12, atol=0)


class TestBackward:
    def test_sum_gives_ones(self):
        w = leaf(np.zeros((2, 3, 4)))
        ad.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 3, 4)))

    def test_mse_at_minimum(self):
        y = np.arange(6.0).reshape(2, 3)
        p = leaf(y.copy())
        ad.mse(p, y).backward()
        np.testing.assert_array_equal(p.grad, np.zeros_like(y))

    def test_non_scalar_loss(self):
        with pytest.raises(RankError):
            ad.mul(leaf(np.ones(3)), 2.0).backward()

    def test_gradients_accumulate(self):
        x = leaf([1.0, 2.0])
        for _ in range(3):
            ad.sum_all(ad.mul(x, 2.0)).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_shared_subexpression(self):
        x = leaf([3.0])
        y = ad.mul(x, x)
        ad.sum_all(ad.add(y, y)).backward()
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = ad.mul(x, 3.0)
        assert not y.requires_grad and y._parents == ()

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["requires_grad"] = ad.mul(leaf([1.0]), 2.0).requires_grad

        with no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["requires_grad"]

    def test_rank_limit(self):
        with pytest.raises(RankError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_nonfinite_input(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_result(self):
        with pytest.raises(NonFiniteError):
            ad.mul(Tensor([1e300]), Tensor([1e300]))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 2), elements=finite), st.floats(-3, 3), st.floats(-3, 3))
    def test_gradient_is_linear_in_the_loss(self, x, a, b):
        w1 = np.arange(6.0).reshape(3, 2)
        w2 = np.ones((3, 2))

        def grad_of(fn):
            t = leaf(x)
            fn(t).backward()
            return t.grad

        f = lambda t: ad.sum_all(ad.mul(ad.tanh(t), w1))
        g = lambda t: ad.sum_all(ad.mul(ad.elu(t), w2))
        combo = grad_of(lambda t: ad.add(ad.mul(f(t), a), ad.mul(g(t), b)))
        np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=1e-12, atol=1e-12)

    def test_tape_replay_is_deterministic(self):
        rng = np.random.default_rng(3)
        x0, w0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 4))
        grads = []
        for _ in range(2):
            x, w = leaf(x0), leaf(w0)
            h = ad.tanh(ad.linear(x, w))
            loss = ad.mean_all(ad.square(ad.add(h, ad.mean_over_agents(h, keepdims=True))))
            loss.backward()
            grads.append((x.grad.tobytes(), w.grad.tobytes()))
        assert grads[0] == grads[1]


class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        p = leaf([1.0, -2.0])
        p.grad = np.zeros(2)
        adam_step([p], AdamState(lr=0.1))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = leaf([1.0])
        p.grad = np.array([1.0])
        adam_step([p], AdamState(lr=0.1))
        assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)

    def test_missing_gradient(self):
        with pytest.raises(OptimizerStateError):
            adam_step([leaf([1.0])], AdamState())

    def test_moments_match_parameter_shapes(self):
        params = [leaf(np.ones((3, 2))), leaf(np.ones(5))]
        opt = Adam(params, lr=0.01)
        for p in params:
            p.grad = np.ones_like(p.data)
        opt.step()
        assert [m.shape for m in opt.state.m] == [(3, 2), (5,)]
        assert [v.shape for v in opt.state.v] == [(3, 2), (5,)]

    def test_minimises_quadratic(self):
        p = leaf([5.0, -3.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            ad.sum_all(ad.square(p)).backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


def test_clip_grad_norm():
    a, b = leaf([0.0, 0.0]), leaf([0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0)


def test_gru_cell_at_zero():
    z = Tensor(np.zeros((2, 3)))
    wi, wh = Tensor(np.zeros((3, 9))), Tensor(np.zeros((3, 9)))
    out = ad.gru_cell(z, z, wi, wh, Tensor(np.zeros(9)), Tensor(np.zeros(9)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_gru_cell_matches_textbook_formula():
    rng = np.random.default_rng(1)
    x, h = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    wi, wh, bi, bh = rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), rng.normal(size=6), rng.normal(size=6)
    sig = lambda v: 1 / (1 + np.exp(-v))
    gi, gh = x @ wi + bi, h @ wh + bh
    r = sig(gi[:, 0:2] + gh[:, 0:2])
    z = sig(gi[:, 2:4] + gh[:, 2:4])
    n = np.tanh(gi[:, 4:] + r * gh[:, 4:])
    expected = (1 - z) * n + z * h
    got = ad.gru_cell(Tensor(x), Tensor(h), Tensor(wi), Tensor(wh), Tensor(bi), Tensor(bh)).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-14)


def test_numerical_gradient_restores_input():
    arr = np.array([1.0, 2.0])
    before = arr.copy()
    g = numerical_gradient(lambda: float((arr ** 2).sum()), arr)
    np.testing.assert_array_equal(arr, before)
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)


def test_check_case_flags_a_wrong_gradient():
    x = leaf([0.3, -0.7])

    def build():
        out = ad.sum_all(ad.square(x))
        return out

    assert check_case(build, [x])[2]
    broken = leaf([0.3, -0.7])

    def bad():
        y = Tensor(broken.data ** 2)  # value depends on x but is off the tape
        return ad.add(ad.sum_all(y), ad.sum_all(ad.mul(broken, 0.0)))

    assert not check_case(bad, [broken])[2]
